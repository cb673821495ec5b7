"""Analytic vs central-difference gradients for the whole training pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import VOID
from .crf import FULL, POTTS, Compatibility, PairwiseModel
from .filtering import KernelSpec
from .learning import SIGMA_BRUTE, TrainOptions, loss_nll, sample_forward_backward
from .meanfield import MfConfig, mf_infer
from .unary import make_provider

REL_TOL = 1e-4
ABS_TOL = 1e-7


@dataclass
class CheckRow:
    group: str
    name: str
    analytic: float
    numeric: float

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_error(self) -> float:
        # Denominator floored at ABS_TOL / REL_TOL so that both tolerances map to one threshold.
        return self.abs_error / max(abs(self.analytic), abs(self.numeric), ABS_TOL / REL_TOL)

    @property
    def ok(self) -> bool:
        return self.rel_error <= REL_TOL


@dataclass
class Instance:
    image: np.ndarray
    labels: np.ndarray
    provider: object
    model: PairwiseModel
    mf: MfConfig


def random_instance(seed=0, size=8, num_labels=3, iterations=3, unary="convnet", compat=FULL,
                    void_fraction=0.1) -> Instance:
    """Small image with random parameters: spatial + bilateral kernels, signed weights."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 255, (size, size, 3))
    labels = rng.integers(0, num_labels, (size, size))
    labels[rng.random((size, size)) < void_fraction] = VOID
    provider = make_provider(unary, num_labels, seed=seed)
    if hasattr(provider, "fit_stats"):
        provider.mean, provider.std = type(provider).fit_stats([image])
    for k in provider.params:
        if k.endswith(".b"):
            provider.params[k] = rng.normal(0, 0.1, provider.params[k].shape)
    specs = [KernelSpec("spatial", tuple(rng.uniform(1.5, 3.0, 2))),
             KernelSpec("bilateral", tuple(np.concatenate([rng.uniform(2.0, 4.0, 2), rng.uniform(40, 80, 3)])))]
    weights = rng.uniform(-1.0, 1.0, 2)
    if compat == FULL:
        a = rng.normal(size=(num_labels, num_labels))
        comp = Compatibility(FULL, (a + a.T) / 2)
    else:
        comp = Compatibility(POTTS)
    return Instance(image, labels, provider, PairwiseModel(specs, weights, comp), MfConfig(iterations=iterations))


def instance_loss(inst: Instance) -> float:
    scores = inst.provider.clone().forward(inst.image)
    plans = inst.model.plans(inst.image, "brute")
    return loss_nll(mf_infer(scores, inst.model, plans, inst.mf).final, inst.labels).value


def _param_views(inst: Instance):
    """name -> (group, array, setter) for every learnable array."""
    out = {}
    for grp, names in inst.provider.groups.items():
        for n in names:
            out[n] = (f"unary.{grp}", inst.provider.params[n], None)
    out["crf.w"] = ("crf.w", inst.model.weights, None)
    for m, spec in enumerate(inst.model.kernels):
        arr = np.array(spec.sigma)

        def setter(a, m=m):
            inst.model.kernels[m] = inst.model.kernels[m].with_sigma(a)

        out[f"crf.sigma{m}"] = ("crf.sigma", arr, setter)
    if inst.model.compat.mode == FULL:
        out["crf.mu"] = ("crf.mu", inst.model.compat.matrix, None)
    return out


def _directional_fd(inst, arr, setter, direction, h):
    base = arr.copy()
    vals = []
    for sgn in (1.0, -1.0):
        arr[...] = base + sgn * h * direction
        if setter is not None:
            setter(arr)
        vals.append(instance_loss(inst))
    arr[...] = base
    if setter is not None:
        setter(arr)
    return (vals[0] - vals[1]) / (2 * h)


def check_instance(inst: Instance, h=1e-5, max_coords=20, seed=0) -> list:
    """Rows for every CRF scalar plus sampled coordinates and one random
    direction for each unary tensor with more than ``max_coords`` entries."""
    rng = np.random.default_rng(seed)
    opts = TrainOptions(crf_enabled=True, mf=inst.mf, sigma_grad=SIGMA_BRUTE)
    _, grads = sample_forward_backward(inst.provider.clone(), inst.model, inst.image, inst.labels, opts)
    rows = []
    for name, (group, arr, setter) in _param_views(inst).items():
        g = np.asarray(grads[name])
        if name == "crf.mu":
            L = arr.shape[0]
            for i in range(L):
                for j in range(i, L):
                    d = np.zeros_like(arr)
                    d[i, j] = d[j, i] = 1.0
                    rows.append(CheckRow(group, f"{name}[{i},{j}]", float((g * d).sum()),
                                         _directional_fd(inst, arr, setter, d, h)))
            continue
        if arr.size <= max_coords:
            coords = list(np.ndindex(arr.shape))
        else:
            flat = rng.choice(arr.size, max_coords, replace=False)
            coords = [tuple(int(i) for i in np.unravel_index(int(k), arr.shape)) for k in sorted(flat)]
        for c in coords:
            d = np.zeros_like(arr)
            d[c] = 1.0
            rows.append(CheckRow(group, f"{name}{list(map(int, c))}", float(g[c]), _directional_fd(inst, arr, setter, d, h)))
        if arr.size > max_coords:
            d = rng.normal(size=arr.shape)
            d /= np.linalg.norm(d)
            rows.append(CheckRow(group, f"{name}<random direction>", float((g * d).sum()),
                                 _directional_fd(inst, arr, setter, d, h)))
    return rows


def summarize(rows) -> list:
    """Worst row per parameter group, in first-seen order."""
    worst = {}
    for r in rows:
        if r.group not in worst or r.rel_error > worst[r.group].rel_error:
            worst[r.group] = r
    return list(worst.values())
