"""Gaussian filtering over per-pixel feature vectors.

Two plan types share one interface:

* :class:`BrutePlan` evaluates ``out_i = sum_j k(f_i, f_j) v_j`` exactly.
  Small grids cache the dense kernel matrix; the spatial kernel on a full
  pixel grid is applied through its separable (Kronecker) factorisation,
  which is still exact.
* :class:`LatticePlan` approximates the same operator in O(N d) with a
  permutohedral lattice (splat, blur along the d+1 lattice axes, slice).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

SPATIAL = "spatial"
BILATERAL = "bilateral"
FEATURE_DIMS = {SPATIAL: 2, BILATERAL: 5}

# Dense kernel matrices above this many pixels are never materialised.
DENSE_CACHE_LIMIT = 4096
_CHUNK_ELEMS = 1 << 22


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureField:
    """Per-pixel feature vectors on an H x W grid, row-major, shape (N, d)."""

    height: int
    width: int
    values: np.ndarray
    kind: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != self.height * self.width or v.shape[1] < 1:
            raise FilterError(f"feature array of shape {v.shape} does not fit a {self.height}x{self.width} grid")
        if not np.all(np.isfinite(v)):
            raise FilterError("features must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    sigma: tuple

    def __post_init__(self):
        if self.kind not in FEATURE_DIMS:
            raise FilterError(f"unknown feature kind {self.kind!r}")
        s = tuple(float(x) for x in self.sigma)
        if len(s) != FEATURE_DIMS[self.kind]:
            raise FilterError(f"{self.kind} kernel needs {FEATURE_DIMS[self.kind]} bandwidths, got {len(s)}")
        if not all(x > 0 and np.isfinite(x) for x in s):
            raise FilterError(f"bandwidths must be positive, got {s}")
        object.__setattr__(self, "sigma", s)

    def with_sigma(self, sigma) -> "KernelSpec":
        return KernelSpec(self.kind, tuple(sigma))


def build_features(image: np.ndarray, kind: str) -> FeatureField:
    """Pixel features in raw units: (col, row) or (col, row, R, G, B)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise FilterError(f"expected a nonempty H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    xy = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    if kind == SPATIAL:
        return FeatureField(h, w, xy, SPATIAL)
    if kind == BILATERAL:
        rgb = image.reshape(h * w, -1)[:, :3].astype(np.float64)
        return FeatureField(h, w, np.hstack([xy, rgb]), BILATERAL)
    raise FilterError(f"unknown feature kind {kind!r}")


def kernel_value(fi, fj, spec: KernelSpec) -> float:
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    sigma = np.asarray(spec.sigma)
    if fi.shape != fj.shape or fi.shape != sigma.shape:
        raise FilterError(f"feature/bandwidth dimensions disagree: {fi.shape}, {fj.shape}, {sigma.shape}")
    if np.any(sigma <= 0):
        raise FilterError("bandwidths must be positive")
    z = (fi - fj) / sigma
    return float(np.exp(-0.5 * np.dot(z, z)))


def _check_values(plan, values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, :, None]
    if v.ndim != 3 or v.shape[:2] != (plan.height, plan.width):
        raise FilterError(f"values of shape {np.shape(values)} do not match the {plan.height}x{plan.width} plan")
    return v


def _gauss_1d(n: int, sigma: float):
    """1-D kernel matrix over 0..n-1 and the squared offsets."""
    idx = np.arange(n, dtype=np.float64)
    d = idx[:, None] - idx[None, :]
    return np.exp(-0.5 * (d / sigma) ** 2), d * d


def _is_pixel_grid(feats: FeatureField) -> bool:
    h, w = feats.height, feats.width
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.array_equal(feats.values[:, 0], cols) and np.array_equal(feats.values[:, 1], rows)


@dataclass
class BrutePlan:
    """Exact O(N^2) Gaussian filter."""

    feats: FeatureField
    spec: KernelSpec
    _dense: np.ndarray | None = field(default=None, repr=False)
    _separable: tuple | None = field(default=None, repr=False)

    mode = "brute"

    def __post_init__(self):
        if self.feats.dim != len(self.spec.sigma):
            raise FilterError(f"{self.feats.dim}-d features with a {len(self.spec.sigma)}-d kernel")
        self.sigma = np.asarray(self.spec.sigma)
        self._z = self.feats.values / self.sigma
        if self.spec.kind == SPATIAL and _is_pixel_grid(self.feats):
            kx, dx = _gauss_1d(self.width, self.sigma[0])
            ky, dy = _gauss_1d(self.height, self.sigma[1])
            self._separable = (kx, ky, dx, dy)
        elif self.n <= DENSE_CACHE_LIMIT:
            self._dense = self._rows(0, self.n)

    @property
    def height(self):
        return self.feats.height

    @property
    def width(self):
        return self.feats.width

    @property
    def n(self):
        return self.feats.n

    def _rows(self, start, stop):
        # cdist squares exact differences: symmetric, zero diagonal.
        d2 = cdist(self._z[start:stop], self._z, "sqeuclidean")
        return np.exp(-0.5 * d2, out=d2)

    def matrix(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        if self._separable is not None:
            kx, ky = self._separable[:2]
            return np.kron(ky, kx)
        return self._rows(0, self.n)

    def apply(self, flat: np.ndarray) -> np.ndarray:
        """Filter an (N, C) array."""
        if self._separable is not None:
            kx, ky = self._separable[:2]
            c = flat.shape[1]
            grid = flat.reshape(self.height, self.width, c)
            out = np.einsum("ab,bwc->awc", ky, grid)
            out = np.einsum("xw,awc->axc", kx, out)
            return out.reshape(self.n, c)
        if self._dense is not None:
            return self._dense @ flat
        out = np.empty_like(flat)
        step = max(1, _CHUNK_ELEMS // self.n)
        for s in range(0, self.n, step):
            e = min(self.n, s + step)
            out[s:e] = self._rows(s, e) @ flat
        return out

    def apply_grad_sigma(self, flat: np.ndarray, dim: int) -> np.ndarray:
        """d/d sigma_dim of ``apply`` for fixed input."""
        s = self.sigma[dim]
        if self._separable is not None:
            kx, ky, dx, dy = self._separable
            c = flat.shape[1]
            if dim == 0:
                kx = kx * dx / s**3
            else:
                ky = ky * dy / s**3
            grid = flat.reshape(self.height, self.width, c)
            out = np.einsum("ab,bwc->awc", ky, grid)
            out = np.einsum("xw,awc->axc", kx, out)
            return out.reshape(self.n, c)
        f = self.feats.values[:, dim]
        out = np.empty_like(flat)
        step = max(1, _CHUNK_ELEMS // self.n)
        for a in range(0, self.n, step):
            b = min(self.n, a + step)
            k = self._dense[a:b] if self._dense is not None else self._rows(a, b)
            diff = f[a:b, None] - f[None, :]
            out[a:b] = (k * (diff * diff) / s**3) @ flat
        return out

    def grad_sigma_contract(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """sum_{i,j,c} left[i,c] * dK_ij/dsigma_d * right[j,c] for every d.

        Equivalent to contracting ``left`` with ``apply_grad_sigma(right, d)``
        but shares one N x N pass across all dimensions.
        """
        dims = len(self.sigma)
        if self._separable is not None:
            return np.array([float((left * self.apply_grad_sigma(right, d)).sum()) for d in range(dims)])
        x = self.feats.values - self.feats.values.mean(axis=0)
        x2 = x * x
        out = np.zeros(dims)
        step = max(1, _CHUNK_ELEMS // self.n)
        for a in range(0, self.n, step):
            b = min(self.n, a + step)
            k = self._dense[a:b] if self._dense is not None else self._rows(a, b)
            w = (left[a:b] @ right.T) * k
            rs = w.sum(axis=1)
            cs = w.sum(axis=0)
            out += x2[a:b].T @ rs + x2.T @ cs - 2.0 * ((w @ x) * x[a:b]).sum(axis=0)
        return out / self.sigma**3


class _HashTable:
    """Maps integer lattice coordinates to sortable int64 codes.

    Coordinates are packed exactly in mixed radix when the bounding box fits
    in 62 bits, otherwise hashed by multiply-xor mixing.
    """

    _MIX = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9,
                     0xD6E8FEB86659FD93, 0xFF51AFD7ED558CCD, 0xC4CEB9FE1A85EC53,
                     0x94D049BB133111EB, 0xBF58476D1CE4E5B9], dtype=np.uint64)

    def __init__(self, keys: np.ndarray, margin: int = 2):
        pad = margin * (keys.shape[1] + 2)
        self.offset = keys.min(axis=0) - pad
        span = keys.max(axis=0) - self.offset + pad + 1
        radix = np.ones(keys.shape[1], dtype=np.int64)
        total = 1
        for k in range(keys.shape[1] - 1, -1, -1):
            if total >= 2**62:
                break
            radix[k] = total
            total *= int(span[k])
        self.radix = radix if total < 2**62 else None

    def pack(self, keys: np.ndarray) -> np.ndarray:
        if self.radix is not None:
            return (keys - self.offset) @ self.radix
        h = np.zeros(keys.shape[0], dtype=np.uint64)
        with np.errstate(over="ignore"):
            for k in range(keys.shape[1]):
                h = (h ^ (keys[:, k].astype(np.uint64) * self._MIX[k % 8])) * self._MIX[(k + 3) % 8]
                h ^= h >> np.uint64(31)
        return h.view(np.int64)


@lru_cache(maxsize=None)
def _scale_factors(d: int) -> np.ndarray:
    # Elevation scaling under which one splat-blur-slice pass approximates a
    # unit-bandwidth Gaussian in the input space.
    inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
    return np.array([inv_std / np.sqrt((i + 1) * (i + 2)) for i in range(d)])


class _Lattice:
    """One permutohedral lattice over whitened positions (unscaled response)."""

    def __init__(self, pos: np.ndarray, rings: int = 1):
        n, d = pos.shape
        d1 = d + 1
        self.d = d
        cf = pos * _scale_factors(d)

        # Elevate onto the hyperplane x . 1 = 0 in R^{d+1}.
        elevated = np.empty((n, d1))
        sm = np.zeros(n)
        for j in range(d, 0, -1):
            elevated[:, j] = sm - j * cf[:, j - 1]
            sm += cf[:, j - 1]
        elevated[:, 0] = sm

        # Nearest remainder-0 lattice point, then rank the residuals.
        v = elevated / d1
        up = np.ceil(v) * d1
        down = np.floor(v) * d1
        rem0 = np.where(up - elevated < elevated - down, up, down)
        total = np.rint(rem0.sum(axis=1) / d1).astype(np.int64)
        diff = elevated - rem0
        less = diff[:, :, None] < diff[:, None, :]
        upper = np.triu(np.ones((d1, d1), dtype=bool), 1)
        rank = (less & upper).sum(axis=2) + (~less.transpose(0, 2, 1) & upper.T).sum(axis=2)

        # Wrap points whose remainder-0 coordinates do not sum to zero.
        t = total[:, None]
        pos_fix = (t > 0) & (rank >= d1 - t)
        neg_fix = (t < 0) & (rank < -t)
        rem0 = rem0 - d1 * pos_fix + d1 * neg_fix
        rank = rank + t - d1 * pos_fix + d1 * neg_fix

        diff = (elevated - rem0) / d1
        bary = np.zeros((n, d + 2))
        rows = np.arange(n)
        for i in range(d1):
            bary[rows, d - rank[:, i]] += diff[:, i]
            bary[rows, d + 1 - rank[:, i]] -= diff[:, i]
        bary[:, 0] += 1.0 + bary[:, d + 1]
        bary = bary[:, :d1]

        # Simplex vertex r of a point: rem0 + r, minus d+1 where rank > d - r.
        rem0 = rem0.astype(np.int64)
        canonical = np.array([[i if j <= d - i else i - d1 for j in range(d1)] for i in range(d1)])
        keys = np.empty((d1, n, d), dtype=np.int64)
        for r in range(d1):
            keys[r] = rem0[:, :d] + canonical[r][rank[:, :d]]

        flat_keys = keys.reshape(d1 * n, d)
        self.table = _HashTable(flat_keys, margin=rings + 2)
        packed = self.table.pack(flat_keys)
        uniq, first = np.unique(packed, return_index=True)
        # Mixed-radix codes are linear in the key, so neighbour codes are offsets
        # of the vertex code; hashed codes need the keys themselves.
        radix = self.table.radix
        vkeys = None if radix is not None else flat_keys[first]
        for _ in range(rings):
            if radix is not None:
                deltas = np.array([self._step(np.zeros((1, d), np.int64), j, 1)[0] @ radix for j in range(d1)])
                uniq = np.unique(np.concatenate([uniq] + [uniq + sg * dl for dl in deltas for sg in (1, -1)]))
            else:
                ring = np.concatenate([vkeys] + [self._step(vkeys, j, sg) for j in range(d1) for sg in (1, -1)])
                uniq, first = np.unique(self.table.pack(ring), return_index=True)
                vkeys = ring[first]
        inverse = np.searchsorted(uniq, packed)
        nv = uniq.size
        self.num_vertices = nv

        point = np.tile(np.arange(n), d1)
        self.splat = sp.csr_matrix((bary.T.ravel(), (inverse.ravel(), point)), shape=(nv, n))
        self.slice = self.splat.T.tocsr()

        # moves[j] maps a vertex index to itself / its + neighbour / its - neighbour
        # along axis j; index nv stands for a missing vertex and maps to itself.
        ar = np.arange(nv)
        self.moves = np.full((d1, 3, nv + 1), nv, dtype=np.int32)
        self.moves[:, 0] = np.arange(nv + 1)
        for j in range(d1):
            if radix is not None:
                code = uniq + self._step(np.zeros((1, d), np.int64), j, 1)[0] @ radix
            else:
                code = self.table.pack(self._step(vkeys, j, 1))
            idx = np.minimum(np.searchsorted(uniq, code), nv - 1)
            hit = uniq[idx] == code
            self.moves[j, 1, :nv][hit] = idx[hit]
            self.moves[j, 2, idx[hit]] = ar[hit]
        # [1, 2, 1]/4 along each axis; row v holds [v, + neighbour, - neighbour]
        # with absent neighbours dropped.
        self.blur = []
        for j in range(d1):
            cols = self.moves[j, :, :nv].T
            keep = cols < nv
            indptr = np.zeros(nv + 1, dtype=np.int64)
            np.cumsum(keep.sum(axis=1), out=indptr[1:])
            vals = np.full(indptr[-1], 0.25)
            vals[indptr[:-1]] = 0.5
            self.blur.append(sp.csr_matrix((vals, cols[keep], indptr), shape=(nv, nv)))
        self.self_weight = self._self_weight(inverse.reshape(d1, n), bary, rank)

    def _step(self, keys, axis, sign):
        """Neighbour along lattice axis ``axis``."""
        out = keys - sign
        if axis < self.d:
            out[:, axis] = keys[:, axis] + sign * self.d
        return out

    def _self_weight(self, verts, bary, rank):
        """Diagonal of slice . blur . splat, i.e. each point's response to itself.

        Between simplex vertices s and r != s the offset is a signed sum of
        distinct axis steps over D (the axes whose rank lies in (d - max(r, s),
        d - min(r, s)]). With at most one step per axis the forward blur reaches
        it along exactly two step patterns: +-1 on D, or -+1 off D; for r = s the
        patterns are no step, all +1 and all -1. A pattern contributes
        0.5^(d+1) * 0.5^(steps taken) when every vertex on it exists. The blur
        matrices are symmetric, so the reverse-order pass has the same diagonal.
        """
        d, n = self.d, verts.shape[1]
        d1 = d + 1
        pairs = [(r, s) for r in range(d1) for s in range(d1) if r != s]
        r_idx = np.array([r for r, _ in pairs])
        s_idx = np.array([s for _, s in pairs])
        lo = (d - np.maximum(r_idx, s_idx))[:, None, None]
        hi = (d - np.minimum(r_idx, s_idx))[:, None, None]
        on = (rank[None] > lo) & (rank[None] <= hi)                     # pair, point, axis
        fwd = (r_idx < s_idx)[:, None, None]                            # offset is +sum over D
        # Step codes index moves[j]: 0 stay, 1 plus, 2 minus.
        code_on = np.where(on, np.where(fwd, 1, 2), 0).astype(np.int8)
        code_off = np.where(on, 0, np.where(fwd, 2, 1)).astype(np.int8)
        diag = np.arange(d1)
        codes = np.concatenate([code_on, code_off, np.ones((d1, n, d1), np.int8),
                                np.full((d1, n, d1), 2, np.int8)])
        start = verts[np.concatenate([s_idx, s_idx, diag, diag])].astype(np.int32)
        coef = np.concatenate([bary[:, r_idx] * bary[:, s_idx]] * 2 + [bary[:, diag] ** 2] * 2, axis=1).T
        k = on.sum(axis=2)
        taken = np.concatenate([k, d1 - k, np.full((2 * d1, n), d1)])
        nv1 = self.num_vertices + 1
        x = start
        for j in range(d1):
            x = self.moves[j].ravel()[codes[:, :, j].astype(np.int32) * nv1 + x]
        coef = coef * 0.5**taken * (x < self.num_vertices)
        return 0.5**d1 * ((bary**2).sum(axis=1) + coef.sum(axis=0))

    def apply(self, flat: np.ndarray) -> np.ndarray:
        lat = self.splat @ flat
        fwd = lat
        for b in self.blur:
            fwd = b @ fwd
        bwd = lat
        for b in reversed(self.blur):
            bwd = b @ bwd
        return self.slice @ (0.5 * (fwd + bwd))


class LatticePlan:
    """Permutohedral-lattice approximation of :class:`BrutePlan`.

    Each lattice holds the simplex vertices of every point plus ``rings``
    layers of their lattice neighbours, so blurred mass is not dropped at
    empty cells. It blurs with the [1, 2, 1]/4 stencil along all d+1 axes, once
    in forward and once in reverse axis order, averaging the two so that the
    operator is exactly symmetric. ``shifts`` lattices with fixed offsets are
    averaged to suppress aliasing against the lattice cells.

    Only the cross terms j != i come from the lattice: each lattice's exact
    response of a point to itself is subtracted and the exact self term
    k(0) = 1 added back. One scalar gain maps the cross terms onto kernel
    units; it is fitted against exact kernel row sums at a fixed subsample of
    ``calib`` pixels (O(calib * N)).
    """

    mode = "lattice"

    def __init__(self, feats: FeatureField, spec: KernelSpec, shifts: int = 2, rings: int = 1,
                 calib: int = 256):
        if feats.dim != len(spec.sigma):
            raise FilterError(f"{feats.dim}-d features with a {len(spec.sigma)}-d kernel")
        self.feats = feats
        self.spec = spec
        self.height, self.width, self.n = feats.height, feats.width, feats.n
        pos = feats.values / np.asarray(spec.sigma)
        offsets = np.random.default_rng(feats.dim).uniform(0.0, 8.0, size=(shifts, feats.dim))
        offsets[0] = 0.0
        self.lattices = [_Lattice(pos + o, rings) for o in offsets]
        self.num_vertices = sum(lat.num_vertices for lat in self.lattices)
        self.self_weight = sum(lat.self_weight for lat in self.lattices)
        self.gain = self._calibrate(pos, calib)

    def _cross(self, flat):
        out = self.lattices[0].apply(flat)
        for lat in self.lattices[1:]:
            out += lat.apply(flat)
        return out - self.self_weight[:, None] * flat

    def _calibrate(self, pos, calib):
        idx = np.unique(np.linspace(0, self.n - 1, min(calib, self.n)).astype(np.int64))
        exact = np.empty(idx.size)
        step = max(1, _CHUNK_ELEMS // self.n)
        for a in range(0, idx.size, step):
            d2 = cdist(pos[idx[a:a + step]], pos, "sqeuclidean")
            exact[a:a + step] = np.exp(-0.5 * d2).sum(axis=1) - 1.0
        approx = self._cross(np.ones((self.n, 1)))[idx, 0]
        den = approx @ approx
        return float(exact @ approx / den) if den > 0 else 0.0

    def apply(self, flat: np.ndarray) -> np.ndarray:
        return self.gain * self._cross(flat) + flat


def build_plan(feats: FeatureField, spec: KernelSpec, mode: str = "brute"):
    if mode == "brute":
        return BrutePlan(feats, spec)
    if mode == "lattice":
        return LatticePlan(feats, spec)
    raise FilterError(f"unknown filter mode {mode!r}")


def filter_brute(plan: BrutePlan, values: np.ndarray) -> np.ndarray:
    if plan.mode != "brute":
        raise FilterError("filter_brute needs a brute-mode plan")
    v = _check_values(plan, values)
    return plan.apply(v.reshape(plan.n, -1)).reshape(v.shape)


def filter_lattice(plan: LatticePlan, values: np.ndarray) -> np.ndarray:
    if plan.mode != "lattice":
        raise FilterError("filter_lattice needs a lattice-mode plan")
    v = _check_values(plan, values)
    return plan.apply(v.reshape(plan.n, -1)).reshape(v.shape)


def apply_filter(plan, values: np.ndarray) -> np.ndarray:
    v = _check_values(plan, values)
    return plan.apply(v.reshape(plan.n, -1)).reshape(v.shape)


def filter_grad_sigma(plan: BrutePlan, values: np.ndarray, dim: int) -> np.ndarray:
    """Derivative of the brute filter output with respect to one bandwidth."""
    if plan.mode != "brute":
        raise FilterError("bandwidth derivatives are only available for brute-mode plans")
    if not 0 <= dim < len(plan.sigma):
        raise FilterError(f"feature index {dim} out of range")
    v = _check_values(plan, values)
    return plan.apply_grad_sigma(v.reshape(plan.n, -1), dim).reshape(v.shape)
