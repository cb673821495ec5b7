"""Label spaces, score/marginal fields and exact enumeration for tiny grids.

Fields are plain float64 arrays of shape (H, W, L); label maps are integer
arrays of shape (H, W).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

VOID = 255
MAX_ENUM_PIXELS = 16
MAX_ENUM_STATES = 10**6


@dataclass(frozen=True)
class LabelSpace:
    num_labels: int
    void_label: int = VOID

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError(f"need at least 2 labels, got {self.num_labels}")
        if 0 <= self.void_label < self.num_labels:
            raise ValueError(f"void label {self.void_label} collides with a real label")


def softmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the last axis."""
    scores = np.asarray(scores, dtype=np.float64)
    bad = ~np.isfinite(scores)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
        raise ValueError(f"non-finite score at pixel {idx}")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_labeling(q: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest label.
    return np.argmax(q, axis=-1).astype(np.int64)


def _flat_pairs(unary, feats_list):
    h, w, L = unary.shape
    n = h * w
    if n > MAX_ENUM_PIXELS:
        raise ValueError(f"{n} pixels exceeds the enumeration limit of {MAX_ENUM_PIXELS}")
    return unary.reshape(n, L), n, L


def _pair_weights(model, feats_list, n):
    """Per-pair kernel mixture sum_m w_m k_m(f_i, f_j) for i < j."""
    from .crf import pair_kernel_sum

    kw = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            kw[i, j] = pair_kernel_sum(model, feats_list, i, j)
    return kw


def global_score(assign, unary: np.ndarray, model, feats_list) -> float:
    """F(y) = sum_i f_i(y_i) + sum_{i<j} f_ij(y_i, y_j), each pair once."""
    u, n, L = _flat_pairs(np.asarray(unary, dtype=np.float64), feats_list)
    y = np.asarray(assign, dtype=np.int64).ravel()
    if y.size != n or np.any((y < 0) | (y >= L)):
        raise ValueError("assignment does not match the grid or label range")
    kw = _pair_weights(model, feats_list, n)
    mu = model.compat_matrix(L)
    total = float(u[np.arange(n), y].sum())
    for i in range(n):
        for j in range(i + 1, n):
            total += mu[y[i], y[j]] * kw[i, j]
    return total


def enumerate_distribution(unary: np.ndarray, model, feats_list):
    """Exact per-pixel marginals and log Z by visiting every configuration.

    Returns ``(marginals, log_z)`` with marginals shaped like ``unary``.
    """
    unary = np.asarray(unary, dtype=np.float64)
    u, n, L = _flat_pairs(unary, feats_list)
    if L**n > MAX_ENUM_STATES:
        raise ValueError(f"{L}^{n} configurations exceeds the enumeration limit")
    kw = _pair_weights(model, feats_list, n)
    mu = model.compat_matrix(L)
    ii, jj = np.triu_indices(n, 1)

    configs = np.array(list(itertools.product(range(L), repeat=n)), dtype=np.int64).reshape(-1, n)
    scores = u[np.arange(n), configs].sum(axis=1)
    if ii.size:
        scores = scores + (mu[configs[:, ii], configs[:, jj]] * kw[ii, jj]).sum(axis=1)
    top = scores.max()
    p = np.exp(scores - top)
    z = p.sum()
    log_z = float(top + np.log(z))
    p /= z
    marg = np.zeros((n, L))
    for i in range(n):
        marg[i] = np.bincount(configs[:, i], weights=p, minlength=L)
    return marg.reshape(unary.shape), log_z
