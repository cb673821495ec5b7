"""Differentiable unary providers.

Both providers map an RGB image (H, W, 3) to full-resolution scores
(H, W, L) and keep the activations of the last forward call so that
``backward`` can return parameter gradients keyed by parameter name.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ProviderError(ValueError):
    pass


def conv2d_forward(x, kernels, bias=None, stride=1, pad=0):
    """Cross-correlation of x (C, H, W) with kernels (O, C, kh, kw), zero padding."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ProviderError(f"conv shapes do not fit: input {x.shape}, kernels {kernels.shape}")
    o, c, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ProviderError(f"input {x.shape} smaller than kernel {kernels.shape[2:]} after padding")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(kernels, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += np.asarray(bias)[:, None, None]
    cache = (x.shape, xp, kernels, stride, pad)
    return out, cache


def conv2d_backward(cache, upstream):
    """Returns (d_input, d_kernels, d_bias)."""
    in_shape, xp, kernels, stride, pad = cache
    o, c, kh, kw = kernels.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    if upstream.shape != (o,) + win.shape[1:3]:
        raise ProviderError(f"upstream {upstream.shape} does not match conv output {(o,) + win.shape[1:3]}")
    d_kernels = np.tensordot(upstream, win, axes=([1, 2], [1, 2]))
    d_bias = upstream.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    oh, ow = upstream.shape[1:]
    # Scatter each kernel tap back; kh * kw passes over the whole map.
    for a in range(kh):
        for b in range(kw):
            contrib = np.tensordot(kernels[:, :, a, b], upstream, axes=([0], [0]))
            dxp[:, a:a + stride * oh:stride, b:b + stride * ow:stride] += contrib
    h, w = in_shape[1:]
    d_input = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
    return d_input, d_kernels, d_bias


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def maxpool_forward(x):
    """2x2 max pooling, stride 2; odd sizes are padded so output is ceil(n/2)."""
    c, h, w = x.shape
    ph, pw = h + h % 2, w + w % 2
    xp = np.full((c, ph, pw), -np.inf)
    xp[:, :h, :w] = x
    blocks = xp.reshape(c, ph // 2, 2, pw // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ph // 2, pw // 2, 4)
    # argmax takes the first maximum in scan order within each window.
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool_backward(cache, upstream):
    shape, arg = cache
    c, h, w = shape
    ph, pw = h + h % 2, w + w % 2
    blocks = np.zeros((c, ph // 2, pw // 2, 4))
    np.put_along_axis(blocks, arg[..., None], upstream[..., None], axis=-1)
    full = blocks.reshape(c, ph // 2, pw // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ph, pw)
    return full[:, :h, :w]


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (dst, src)."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(coarse: np.ndarray, target) -> np.ndarray:
    """Upsample (h', w', L) to (H, W, L) with corner pixels mapped exactly."""
    h, w = coarse.shape[:2]
    H, W = target
    if H < h or W < w:
        raise ProviderError(f"target {target} smaller than source {(h, w)}")
    uy, ux = _interp_matrix(h, H), _interp_matrix(w, W)
    rows = np.tensordot(uy, coarse, axes=(1, 0))            # H, w, L
    return np.einsum("HwL,Ww->HWL", rows, ux, optimize=True)


def bilinear_adjoint(upstream: np.ndarray, source) -> np.ndarray:
    h, w = source
    H, W = upstream.shape[:2]
    if H < h or W < w:
        raise ProviderError(f"target {(H, W)} smaller than source {source}")
    uy, ux = _interp_matrix(h, H), _interp_matrix(w, W)
    rows = np.tensordot(uy, upstream, axes=(0, 0))          # h, W, L
    return np.einsum("hWL,Ww->hwL", rows, ux, optimize=True)


def glorot_uniform(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def pixel_features(image: np.ndarray) -> np.ndarray:
    """(x, y, r, g, b) per pixel in raw units, shape (H*W, 5)."""
    h, w = image.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    return np.column_stack([cols.ravel(), rows.ravel(), image.reshape(h * w, 3).astype(np.float64)])


class LinearUnary:
    """Per-pixel softmax-regression scores on standardized (x, y, r, g, b)."""

    kind = "linear"
    groups = {"top": ("W",)}

    def __init__(self, num_labels, seed=0, mean=None, std=None):
        rng = np.random.default_rng(seed)
        self.num_labels = num_labels
        self.params = {"W": glorot_uniform(rng, (6, num_labels), 6, num_labels)}
        self.mean = np.zeros(5) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(5) if std is None else np.asarray(std, dtype=np.float64)
        self._cache = None

    @staticmethod
    def fit_stats(images):
        feats = np.concatenate([pixel_features(im) for im in images])
        std = feats.std(axis=0)
        return feats.mean(axis=0), np.where(std > 0, std, 1.0)

    def design(self, image):
        x = (pixel_features(image) - self.mean) / self.std
        return np.column_stack([x, np.ones(x.shape[0])])

    def forward(self, image):
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ProviderError(f"expected an H x W x 3 image, got {image.shape}")
        h, w = image.shape[:2]
        x = self.design(image)
        self._cache = (x, (h, w))
        return (x @ self.params["W"]).reshape(h, w, self.num_labels)

    def backward(self, d_scores):
        if self._cache is None:
            raise ProviderError("backward called without a matching forward")
        x, (h, w) = self._cache
        self._cache = None
        return {"W": x.T @ np.asarray(d_scores).reshape(h * w, self.num_labels)}

    def clone(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other._cache = None
        return other


class ConvNetUnary:
    """conv3x3(3->16) relu, conv3x3(16->16) relu, maxpool 2, conv3x3(16->32) relu,
    conv1x1(32->L); the half-resolution map is bilinearly upsampled."""

    kind = "convnet"
    groups = {"top": ("conv4.W", "conv4.b"),
              "body": ("conv1.W", "conv1.b", "conv2.W", "conv2.b", "conv3.W", "conv3.b")}
    layout = (("conv1", 3, 16, 3), ("conv2", 16, 16, 3), ("conv3", 16, 32, 3), ("conv4", 32, None, 1))

    def __init__(self, num_labels, seed=0, mean=None, std=None):
        rng = np.random.default_rng(seed)
        self.num_labels = num_labels
        self.params = {}
        for name, cin, cout, k in self.layout:
            cout = cout or num_labels
            self.params[f"{name}.W"] = glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
            self.params[f"{name}.b"] = np.zeros(cout)
        self.mean = np.zeros(3) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(3) if std is None else np.asarray(std, dtype=np.float64)
        self._cache = None

    @staticmethod
    def fit_stats(images):
        px = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images])
        std = px.std(axis=0)
        return px.mean(axis=0), np.where(std > 0, std, 1.0)

    def coarse(self, image):
        p = self.params
        x = ((np.asarray(image, dtype=np.float64) - self.mean) / self.std).transpose(2, 0, 1)
        a1, c1 = conv2d_forward(x, p["conv1.W"], p["conv1.b"], pad=1)
        r1 = relu_forward(a1)
        a2, c2 = conv2d_forward(r1, p["conv2.W"], p["conv2.b"], pad=1)
        r2 = relu_forward(a2)
        pooled, cp = maxpool_forward(r2)
        a3, c3 = conv2d_forward(pooled, p["conv3.W"], p["conv3.b"], pad=1)
        r3 = relu_forward(a3)
        out, c4 = conv2d_forward(r3, p["conv4.W"], p["conv4.b"])
        cache = (c1, a1, c2, a2, cp, c3, a3, c4)
        return out.transpose(1, 2, 0), cache

    def forward(self, image):
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ProviderError(f"expected an H x W x 3 image, got {image.shape}")
        coarse, cache = self.coarse(image)
        self._cache = (cache, coarse.shape[:2])
        return bilinear_upsample(coarse, image.shape[:2])

    def backward(self, d_scores):
        if self._cache is None:
            raise ProviderError("backward called without a matching forward")
        (c1, a1, c2, a2, cp, c3, a3, c4), src = self._cache
        self._cache = None
        g = bilinear_adjoint(np.asarray(d_scores, dtype=np.float64), src).transpose(2, 0, 1)
        grads = {}
        g, grads["conv4.W"], grads["conv4.b"] = conv2d_backward(c4, g)
        g, grads["conv3.W"], grads["conv3.b"] = conv2d_backward(c3, relu_backward(a3, g))
        g = maxpool_backward(cp, g)
        g, grads["conv2.W"], grads["conv2.b"] = conv2d_backward(c2, relu_backward(a2, g))
        _, grads["conv1.W"], grads["conv1.b"] = conv2d_backward(c1, relu_backward(a1, g))
        return grads

    def clone(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other._cache = None
        return other


PROVIDERS = {"linear": LinearUnary, "convnet": ConvNetUnary}


def make_provider(kind, num_labels, seed=0):
    try:
        return PROVIDERS[kind](num_labels, seed=seed)
    except KeyError:
        raise ProviderError(f"unknown unary provider {kind!r}") from None


def provider_forward(provider, image):
    return provider.forward(image)


def provider_backward(provider, d_scores):
    """Parameter gradients regrouped as {group: {name: grad}}."""
    grads = provider.backward(d_scores)
    return {grp: {n: grads[n] for n in names} for grp, names in provider.groups.items()}
