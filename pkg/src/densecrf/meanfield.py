"""Mean-field inference for the dense CRF."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import softmax_normalize
from .crf import (
    MAX_EXPECTED_PIXELS,
    PairwiseModel,
    expected_pairwise_score,
    filter_responses,
    kernel_mixture_matrix,
    message_from_responses,
    pairwise_message,
)

PARALLEL = "parallel"
SEQUENTIAL = "sequential"
LOG_FLOOR = 1e-20


@dataclass(frozen=True)
class MfConfig:
    iterations: int = 5
    update_mode: str = PARALLEL
    filter_mode: str = "brute"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        if self.update_mode not in (PARALLEL, SEQUENTIAL):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        if self.filter_mode not in ("brute", "lattice"):
            raise ValueError(f"unknown filter mode {self.filter_mode!r}")


@dataclass
class MfTrajectory:
    """q^0 .. q^T plus the filtered responses K_m q^{t-1} used at step t."""

    unary: np.ndarray
    marginals: list = field(default_factory=list)
    responses: list = field(default_factory=list)
    mode: str = PARALLEL

    @property
    def final(self) -> np.ndarray:
        return self.marginals[-1]

    @property
    def iterations(self) -> int:
        return len(self.marginals) - 1


def mf_init(unary: np.ndarray) -> np.ndarray:
    return softmax_normalize(unary)


def mf_step_parallel(q, unary, model: PairwiseModel, plans) -> np.ndarray:
    return softmax_normalize(unary + pairwise_message(q, model, plans))


def _check_small(q):
    n = q.shape[0] * q.shape[1]
    if n > MAX_EXPECTED_PIXELS:
        raise ValueError(f"{n} pixels exceeds the {MAX_EXPECTED_PIXELS}-pixel limit for scalar updates")
    return n


def mf_step_sequential(q, unary, model: PairwiseModel, feats_list, order=None, kw=None) -> np.ndarray:
    """One Gauss-Seidel sweep: pixels updated in ``order``, each from the freshest marginals."""
    q = np.array(q, dtype=np.float64)
    h, w, L = q.shape
    n = _check_small(q)
    qf = q.reshape(n, L)
    uf = np.asarray(unary, dtype=np.float64).reshape(n, L)
    if kw is None:
        kw = kernel_mixture_matrix(model, feats_list) if model.num_kernels else np.zeros((n, n))
    mu_t = model.compat_matrix(L).T
    for i in (range(n) if order is None else order):
        s = uf[i] + (kw[i] @ qf) @ mu_t
        e = np.exp(s - s.max())
        qf[i] = e / e.sum()
    return q


def mf_run_sequential(q, unary, model, feats_list, tol=1e-12, max_sweeps=10000, order=None):
    """Sweep until no marginal moves by more than ``tol``; returns (q, objective per sweep)."""
    n = _check_small(np.asarray(q))
    kw = kernel_mixture_matrix(model, feats_list) if model.num_kernels else np.zeros((n, n))
    history = [variational_objective(q, unary, model, feats_list)]
    for _ in range(max_sweeps):
        new = mf_step_sequential(q, unary, model, feats_list, order=order, kw=kw)
        history.append(variational_objective(new, unary, model, feats_list))
        change = np.abs(new - q).max()
        q = new
        if change < tol:
            break
    return q, history


def mf_infer(unary, model: PairwiseModel, plans, cfg: MfConfig = MfConfig()) -> MfTrajectory:
    unary = np.asarray(unary, dtype=np.float64)
    q = mf_init(unary)
    traj = MfTrajectory(unary=unary, marginals=[q], mode=cfg.update_mode)
    if cfg.update_mode == SEQUENTIAL:
        feats_list = [p.feats for p in plans]
        for _ in range(cfg.iterations):
            q = mf_step_sequential(q, unary, model, feats_list)
            traj.marginals.append(q)
        return traj
    # Responses are kept even when every weight is zero: the weight gradient needs them.
    for _ in range(cfg.iterations):
        if model.num_kernels:
            g = filter_responses(q, plans)
            q = softmax_normalize(unary + message_from_responses(q, g, model))
        else:
            g = [np.zeros_like(q) for _ in plans]
            q = softmax_normalize(unary)
        traj.responses.append(g)
        traj.marginals.append(q)
    return traj


def fixed_point_residual(q, unary, model, feats_list) -> float:
    """Largest change one closed-form update would make to any marginal."""
    n = _check_small(np.asarray(q))
    L = q.shape[-1]
    kw = kernel_mixture_matrix(model, feats_list) if model.num_kernels else np.zeros((n, n))
    qf = q.reshape(n, L)
    s = np.asarray(unary).reshape(n, L) + (kw @ qf) @ model.compat_matrix(L).T
    return float(np.abs(softmax_normalize(s) - qf).max())


def variational_objective(q, unary, model: PairwiseModel, feats_list) -> float:
    """-E_q[F] - H(q), i.e. KL(q || p) - log Z."""
    q = np.asarray(q, dtype=np.float64)
    _check_small(q)
    lin = float((q * unary).sum())
    pair = expected_pairwise_score(q, model, feats_list)
    pos = q > 0
    negent = float((q[pos] * np.log(np.maximum(q[pos], LOG_FLOOR))).sum())
    return -lin - pair + negent
