"""Surrogate loss on mean-field marginals and its exact gradient.

The backward pass walks the stored mean-field iterations from q^T back to
q^0, so its cost grows with the number of iterations rather than with the
number of CRF parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import VOID, softmax_normalize
from .crf import FULL, POTTS, PairwiseModel
from .filtering import apply_filter
from .meanfield import PARALLEL, MfConfig, MfTrajectory, mf_infer
from .optim import OptimState, sgd_step

log = logging.getLogger(__name__)

SIGMA_BRUTE = "brute"
SIGMA_FD = "finite_diff"
SIGMA_FROZEN = "frozen"


class GradientError(ValueError):
    pass


@dataclass
class LossReport:
    value: float
    counted_pixels: int


@dataclass
class GradientBundle:
    d_unary: np.ndarray
    d_weights: np.ndarray
    d_sigma: list
    d_compat: np.ndarray | None = None

    def is_finite(self) -> bool:
        parts = [self.d_unary, self.d_weights, *self.d_sigma]
        if self.d_compat is not None:
            parts.append(self.d_compat)
        return all(np.all(np.isfinite(p)) for p in parts)


def _counted(q, gt, void):
    gt = np.asarray(gt)
    if gt.shape != q.shape[:2]:
        raise GradientError(f"label map {gt.shape} does not match marginals {q.shape[:2]}")
    mask = gt != void
    L = q.shape[-1]
    if np.any((gt[mask] < 0) | (gt[mask] >= L)):
        raise GradientError("label map holds labels outside [0, L) that are not void")
    return mask


def _gt_probs(q, gt, mask):
    rows, cols = np.nonzero(mask)
    return q[rows, cols, gt[rows, cols]], rows, cols


def loss_nll(q, gt, void=VOID, reduction="mean") -> LossReport:
    """Negative log marginal of the ground-truth label over non-void pixels."""
    mask = _counted(q, gt, void)
    n = int(mask.sum())
    if n == 0:
        return LossReport(0.0, 0)
    p, rows, cols = _gt_probs(q, gt, mask)
    if np.any(p <= 0):
        k = int(np.argmax(p <= 0))
        log.warning("zero ground-truth marginal at pixel (%d, %d)", rows[k], cols[k])
        return LossReport(float("inf"), n)
    total = float(-np.log(p).sum())
    return LossReport(total / n if reduction == "mean" else total, n)


def loss_grad_marginals(q, gt, void=VOID, reduction="mean") -> np.ndarray:
    mask = _counted(q, gt, void)
    n = int(mask.sum())
    out = np.zeros_like(q, dtype=np.float64)
    if n == 0:
        return out
    p, rows, cols = _gt_probs(q, gt, mask)
    if np.any(p <= 0):
        k = int(np.argmax(p <= 0))
        raise GradientError(f"zero ground-truth marginal at pixel ({rows[k]}, {cols[k]})")
    scale = 1.0 / n if reduction == "mean" else 1.0
    out[rows, cols, gt[rows, cols]] = -scale / p
    return out


def softmax_backward(q, upstream):
    q = np.asarray(q)
    upstream = np.asarray(upstream)
    return q * (upstream - (upstream * q).sum(axis=-1, keepdims=True))


def _fd_sigma(traj, model, plans, gt, void, reduction, cfg, rel_step=1e-3):
    """Central differences of the loss w.r.t. every bandwidth, via the lattice forward."""
    from .filtering import build_plan

    out = []
    for m, spec in enumerate(model.kernels):
        feats = plans[m].feats
        g = np.zeros(len(spec.sigma))
        for d in range(len(spec.sigma)):
            h = rel_step * spec.sigma[d]
            vals = []
            for sgn in (1.0, -1.0):
                sigma = list(spec.sigma)
                sigma[d] += sgn * h
                trial = list(plans)
                trial[m] = build_plan(feats, spec.with_sigma(sigma), plans[m].mode)
                t = mf_infer(traj.unary, model, trial, cfg)
                vals.append(loss_nll(t.final, gt, void, reduction).value)
            g[d] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def mf_backward(traj: MfTrajectory, model: PairwiseModel, plans, gt, void=VOID, reduction="mean",
                sigma_grad=SIGMA_BRUTE, cfg: MfConfig | None = None) -> GradientBundle:
    """Gradient of the surrogate loss w.r.t. unaries and CRF parameters."""
    if traj.mode != PARALLEL:
        raise GradientError("backward is defined for parallel mean-field trajectories only")
    T = traj.iterations
    if len(traj.responses) != T or (T and len(traj.responses[0]) != model.num_kernels):
        raise GradientError("trajectory does not match the model's kernels")
    if len(plans) != model.num_kernels:
        raise GradientError(f"{len(plans)} plans for {model.num_kernels} kernels")
    if sigma_grad == SIGMA_BRUTE and T and any(p.mode != "brute" for p in plans):
        raise GradientError("exact bandwidth gradients need brute-mode plans; use finite_diff or frozen")

    q_final = traj.final
    h, w, L = q_final.shape
    n = h * w
    mu = model.compat_matrix(L)
    potts = model.compat.mode == POTTS
    M = model.num_kernels

    dq = loss_grad_marginals(q_final, gt, void, reduction)
    d_unary = np.zeros_like(q_final)
    d_w = np.zeros(M)
    d_mu = np.zeros((L, L))
    lefts = [[] for _ in range(M)]
    rights = []

    for t in range(T, 0, -1):
        ds = softmax_backward(traj.marginals[t], dq)
        d_unary += ds
        q_prev = traj.marginals[t - 1]
        resp = traj.responses[t - 1]
        c = ds if potts else ds @ mu
        mixed = np.zeros_like(q_prev)
        for m in range(M):
            diff = resp[m] - q_prev
            d_w[m] += float((c * diff).sum())
            mixed += model.weights[m] * diff
        if not potts:
            d_mu += ds.reshape(n, L).T @ mixed.reshape(n, L)
        rights.append(q_prev.reshape(n, L))
        for m in range(M):
            lefts[m].append(model.weights[m] * c.reshape(n, L))
        dq = np.zeros_like(q_prev)
        for m in range(M):
            if model.weights[m] != 0.0:
                dq += model.weights[m] * (apply_filter(plans[m], c) - c)

    d_unary += softmax_backward(traj.marginals[0], dq)

    if sigma_grad == SIGMA_FROZEN or T == 0:
        d_sigma = [np.zeros(len(s.sigma)) for s in model.kernels]
    elif sigma_grad == SIGMA_BRUTE:
        right = np.hstack(rights)
        d_sigma = [plans[m].grad_sigma_contract(np.hstack(lefts[m]), right) for m in range(M)]
    elif sigma_grad == SIGMA_FD:
        if cfg is None:
            raise GradientError("finite-difference bandwidth gradients need the mean-field config")
        d_sigma = _fd_sigma(traj, model, plans, gt, void, reduction, cfg)
    else:
        raise GradientError(f"unknown sigma_grad mode {sigma_grad!r}")

    return GradientBundle(d_unary, d_w, d_sigma, d_mu if model.compat.mode == FULL else None)


# ---------------------------------------------------------------------------
# Training step


def crf_params(model: PairwiseModel) -> dict:
    """Views onto the model's learnable arrays, keyed by checkpoint name."""
    p = {"crf.w": model.weights}
    for m, spec in enumerate(model.kernels):
        p[f"crf.sigma{m}"] = np.array(spec.sigma)
    if model.compat.mode == FULL:
        p["crf.mu"] = model.compat.matrix
    return p


def apply_crf_params(model: PairwiseModel, params: dict):
    """Write sigma arrays back into the (immutable) kernel specs."""
    for m, spec in enumerate(model.kernels):
        key = f"crf.sigma{m}"
        if key in params:
            model.kernels[m] = spec.with_sigma(params[key])


@dataclass
class StepResult:
    loss: float
    counted_pixels: int
    skipped: bool = False
    grads: dict = field(default_factory=dict)


@dataclass
class TrainOptions:
    crf_enabled: bool = True
    mf: MfConfig = field(default_factory=MfConfig)
    sigma_grad: str = SIGMA_BRUTE
    reduction: str = "mean"
    void: int = VOID
    train_crf: bool = True


def sample_forward_backward(provider, model, image, labels, opts: TrainOptions):
    """Loss and gradients (unary names + CRF names) for one sample."""
    scores = provider.forward(image)
    if opts.crf_enabled and model.num_kernels:
        plans = model.plans(image, opts.mf.filter_mode)
        traj = mf_infer(scores, model, plans, opts.mf)
    else:
        plans = []
        traj = MfTrajectory(unary=scores, marginals=[softmax_normalize(scores)])
        model = PairwiseModel()
    report = loss_nll(traj.final, labels, opts.void, opts.reduction)
    if not np.isfinite(report.value):
        return report, None
    sigma_mode = opts.sigma_grad if opts.train_crf else SIGMA_FROZEN
    bundle = mf_backward(traj, model, plans, labels, opts.void, opts.reduction, sigma_mode, opts.mf)
    grads = provider.backward(bundle.d_unary)
    if opts.crf_enabled and opts.train_crf and model.num_kernels:
        grads["crf.w"] = bundle.d_weights
        if sigma_mode != SIGMA_FROZEN:
            for m, g in enumerate(bundle.d_sigma):
                grads[f"crf.sigma{m}"] = g
        if bundle.d_compat is not None:
            # Keep mu symmetric: project the gradient onto symmetric matrices.
            grads["crf.mu"] = 0.5 * (bundle.d_compat + bundle.d_compat.T)
    return report, grads


def train_step(batch, provider, model: PairwiseModel, state: OptimState, opts: TrainOptions,
               executor=None) -> StepResult:
    """One mini-batch update of the unary parameters and the CRF parameters.

    Per-sample gradients are averaged in batch order. A non-finite gradient
    skips the update and is reported through ``StepResult.skipped``.
    """
    if not batch:
        raise ValueError("empty batch")

    def work(sample):
        image, labels = sample
        return sample_forward_backward(provider.clone(), model, image, labels, opts)

    results = list(executor.map(work, batch)) if executor is not None else [work(s) for s in batch]

    total = {}
    losses = []
    counted = 0
    for report, grads in results:
        losses.append(report.value)
        counted += report.counted_pixels
        if grads is None:
            continue
        for k, g in grads.items():
            total[k] = total[k] + g if k in total else np.array(g, dtype=np.float64)
    for k in total:
        total[k] /= len(batch)
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        log.warning("update skipped: infinite loss (a ground-truth marginal is exactly zero)")
        return StepResult(mean_loss, counted, skipped=True, grads=total)

    params = dict(provider.params)
    params.update(crf_params(model))
    try:
        sgd_step(params, total, state)
    except FloatingPointError as exc:
        log.warning("update skipped: %s", exc)
        return StepResult(mean_loss, counted, skipped=True, grads=total)
    apply_crf_params(model, params)
    return StepResult(mean_loss, counted, grads=total)
