"""Kernel-mixture pairwise model of the dense CRF.

``f_ij(l, l') = mu(l, l') * sum_m w_m k_m(f_i, f_j)`` with one compatibility
``mu`` shared by all kernels. Scores are maximised, so positive weights with
the Potts compatibility reward neighbouring pixels that agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .filtering import FeatureField, KernelSpec, apply_filter, build_features, build_plan, kernel_value

POTTS = "potts"
FULL = "full"
MAX_EXPECTED_PIXELS = 4096


class ModelError(ValueError):
    pass


@dataclass
class Compatibility:
    mode: str = POTTS
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in (POTTS, FULL):
            raise ModelError(f"unknown compatibility mode {self.mode!r}")
        if self.mode == FULL:
            if self.matrix is None:
                raise ModelError("full compatibility needs a matrix")
            m = np.array(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ModelError(f"compatibility matrix must be square, got {m.shape}")
            if not np.allclose(m, m.T, rtol=0, atol=1e-12):
                raise ModelError("compatibility matrix must be symmetric")
            self.matrix = m

    def as_matrix(self, num_labels: int) -> np.ndarray:
        if self.mode == POTTS:
            return np.eye(num_labels)
        if self.matrix.shape[0] != num_labels:
            raise ModelError(f"compatibility is {self.matrix.shape[0]}x{self.matrix.shape[0]}, model has {num_labels} labels")
        return self.matrix


@dataclass
class PairwiseModel:
    kernels: list = field(default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    compat: Compatibility = field(default_factory=Compatibility)

    def __post_init__(self):
        self.kernels = list(self.kernels)
        self.weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.size != len(self.kernels):
            raise ModelError(f"{len(self.kernels)} kernels but {self.weights.size} weights")
        for spec in self.kernels:
            if not isinstance(spec, KernelSpec):
                raise ModelError(f"expected KernelSpec, got {type(spec).__name__}")

    @property
    def num_kernels(self) -> int:
        return len(self.kernels)

    def compat_matrix(self, num_labels: int) -> np.ndarray:
        return self.compat.as_matrix(num_labels)

    def features(self, image: np.ndarray) -> list:
        return [build_features(image, spec.kind) for spec in self.kernels]

    def plans(self, image_or_feats, mode: str = "brute") -> list:
        feats = image_or_feats
        if not isinstance(feats, (list, tuple)):
            feats = self.features(image_or_feats)
        return [build_plan(f, spec, mode) for f, spec in zip(feats, self.kernels)]

    def copy(self) -> "PairwiseModel":
        compat = Compatibility(self.compat.mode, None if self.compat.matrix is None else self.compat.matrix.copy())
        return PairwiseModel(list(self.kernels), self.weights.copy(), compat)


def potts(l: int, l2: int) -> float:
    return 1.0 if l == l2 else 0.0


def pair_kernel_sum(model: PairwiseModel, feats_list, i: int, j: int) -> float:
    """sum_m w_m k_m(f_i, f_j) for one pixel pair."""
    total = 0.0
    for w, spec, feats in zip(model.weights, model.kernels, feats_list):
        total += w * kernel_value(feats.values[i], feats.values[j], spec)
    return total


def pairwise_value(l: int, l2: int, fi, fj, model: PairwiseModel) -> float:
    """Pairwise score for labels (l, l2) at two pixels.

    ``fi``/``fj`` hold one feature vector per kernel (a single vector is
    accepted when the model has one kernel).
    """
    if model.num_kernels == 1 and np.ndim(fi[0]) == 0:
        fi, fj = [fi], [fj]
    if model.compat.mode == POTTS:
        mu = potts(l, l2)
    else:
        mu = float(model.compat.matrix[l, l2])
    if mu == 0.0:
        return 0.0
    s = sum(w * kernel_value(a, b, spec) for w, spec, a, b in zip(model.weights, model.kernels, fi, fj))
    return mu * s


def _check_plans(q, model, plans):
    if len(plans) != model.num_kernels:
        raise ModelError(f"{len(plans)} filter plans for {model.num_kernels} kernels")
    for p in plans:
        if (p.height, p.width) != q.shape[:2]:
            raise ModelError(f"plan grid {p.height}x{p.width} does not match field {q.shape[:2]}")


def filter_responses(q: np.ndarray, plans) -> list:
    """K_m q for each kernel; the filtered values the backward pass reuses."""
    return [apply_filter(p, q) for p in plans]


def message_from_responses(q: np.ndarray, responses, model: PairwiseModel) -> np.ndarray:
    mixed = np.zeros_like(q)
    for w, g in zip(model.weights, responses):
        if w != 0.0:
            mixed += w * (g - q)
    if model.compat.mode == POTTS:
        return mixed
    return mixed @ model.compat_matrix(q.shape[-1]).T


def pairwise_message(q: np.ndarray, model: PairwiseModel, plans) -> np.ndarray:
    """Dense mean-field message, excluding each pixel's interaction with itself."""
    q = np.asarray(q, dtype=np.float64)
    _check_plans(q, model, plans)
    return message_from_responses(q, filter_responses(q, plans), model)


def kernel_mixture_matrix(model: PairwiseModel, feats_list) -> np.ndarray:
    """Dense sum_m w_m K_m with a zero diagonal (the i = j term is not a pair)."""
    n = feats_list[0].n if feats_list else 0
    kw = np.zeros((n, n))
    for w, spec, feats in zip(model.weights, model.kernels, feats_list):
        z = feats.values / np.asarray(spec.sigma)
        kw += w * np.exp(-0.5 * cdist(z, z, "sqeuclidean"))
    np.fill_diagonal(kw, 0.0)
    return kw


def expected_pairwise_score(q: np.ndarray, model: PairwiseModel, feats_list) -> float:
    """E_q[sum_{i<j} f_ij] evaluated pair by pair."""
    q = np.asarray(q, dtype=np.float64)
    h, w, L = q.shape
    n = h * w
    if n > MAX_EXPECTED_PIXELS:
        raise ModelError(f"{n} pixels exceeds the {MAX_EXPECTED_PIXELS}-pixel limit")
    if model.num_kernels == 0:
        return 0.0
    qf = q.reshape(n, L)
    kw = kernel_mixture_matrix(model, feats_list)
    # kw is symmetric with a zero diagonal, so half the full sum covers i < j.
    agree = qf @ model.compat_matrix(L) @ qf.T
    return 0.5 * float((agree * kw).sum())
