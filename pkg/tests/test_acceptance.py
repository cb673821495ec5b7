"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the full training
criteria take roughly a quarter of an hour on one CPU core.
"""
import csv
import json
import time

import numpy as np
import pytest

from densecrf.cli import bench_filter, main
from densecrf.core import enumerate_distribution
from densecrf.crf import FULL, Compatibility, PairwiseModel
from densecrf.filtering import BILATERAL, SPATIAL, KernelSpec, build_features, build_plan, apply_filter
from densecrf.gradcheck import check_instance, random_instance
from densecrf.learning import TrainOptions, sample_forward_backward
from densecrf.meanfield import (
    fixed_point_residual,
    mf_init,
    mf_run_sequential,
    mf_step_parallel,
    mf_step_sequential,
    variational_objective,
)
from densecrf.unary import LinearUnary


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}", flush=True)
        return ok
    return emit


def _random_model(rng, weights, compat=None):
    ss = rng.uniform(1.5, 3.0, 2)
    sb = np.concatenate([rng.uniform(2.0, 4.0, 2), rng.uniform(20.0, 60.0, 3)])
    return PairwiseModel([KernelSpec(SPATIAL, tuple(ss)), KernelSpec(BILATERAL, tuple(sb))],
                         list(weights), compat or Compatibility())


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity(report):
    t0 = time.perf_counter()
    rows = []
    for seed in range(5):
        inst = random_instance(seed=seed, size=8, num_labels=3, iterations=3, unary="convnet")
        rows.extend(check_instance(inst, h=1e-5, seed=seed))
    elapsed = time.perf_counter() - t0
    groups = sorted({r.group for r in rows})
    bad = [r for r in rows if not r.ok]
    worst = max(r.rel_error for r in rows)
    ok = not bad and elapsed < 120
    assert report(1, ok, f"{len(rows)} checks over groups {', '.join(groups)}; {len(bad)} failed; "
                         f"max rel error {worst:.2e}; {elapsed:.1f}s (limit 120s)")


# -- 2 ------------------------------------------------------------------------

def _softmax_regression(image, labels, w, mean, std):
    """Per-pixel softmax regression on (x, y, r, g, b, 1), written from scratch."""
    h, wd = labels.shape
    ys, xs = np.indices((h, wd))
    raw = np.stack([xs, ys, image[..., 0], image[..., 1], image[..., 2]], axis=-1).reshape(-1, 5)
    x = np.hstack([(raw - mean) / std, np.ones((h * wd, 1))])
    s = x @ w
    s = s - s.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    y = labels.ravel()
    keep = y != 255
    n = keep.sum()
    loss = -logp[keep, y[keep]].sum() / n
    d = np.exp(logp)
    d[keep, y[keep]] -= 1.0
    d[~keep] = 0.0
    return loss, x.T @ d / n


def test_criterion_2_reduction_to_softmax_regression(report):
    worst_loss = worst_grad = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 255, (12, 10, 3))
        labels = rng.integers(0, 4, (12, 10))
        labels[rng.random((12, 10)) < 0.15] = 255
        prov = LinearUnary(4, seed=seed)
        prov.mean, prov.std = LinearUnary.fit_stats([image])
        prov.params["W"] = rng.normal(size=(6, 4))
        model = _random_model(rng, (0.5, 0.3))
        rep, grads = sample_forward_backward(prov.clone(), model, image, labels, TrainOptions(crf_enabled=False))
        loss, grad = _softmax_regression(image, labels, prov.params["W"], prov.mean, prov.std)
        worst_loss = max(worst_loss, abs(rep.value - loss))
        worst_grad = max(worst_grad, float(np.abs(grads["W"] - grad).max()))
    ok = worst_loss <= 1e-10 and worst_grad <= 1e-10
    assert report(2, ok, f"max loss gap {worst_loss:.1e}, max gradient gap {worst_grad:.1e} (limit 1e-10)")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_fixed_point_self_consistency(report):
    worst_res = worst_rise = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        image = rng.uniform(0, 255, (8, 8, 3))
        a = rng.normal(size=(3, 3))
        model = _random_model(rng, rng.uniform(-0.5, 0.5, 2), Compatibility(FULL, (a + a.T) / 4))
        feats = model.features(image)
        u = rng.normal(size=(8, 8, 3))
        q, history = mf_run_sequential(mf_init(u), u, model, feats, tol=1e-12)
        worst_res = max(worst_res, fixed_point_residual(q, u, model, feats))
        worst_rise = max(worst_rise, max(b - a for a, b in zip(history, history[1:])))
    ok = worst_res <= 1e-10 and worst_rise <= 1e-12
    assert report(3, ok, f"max fixed-point change {worst_res:.1e} (limit 1e-10); "
                         f"largest objective rise per sweep {worst_rise:.1e} (slack 1e-12)")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_parallel_monotone_under_concave_pairwise(report):
    # mu = -I with negative weights rewards agreement and keeps the pairwise part concave in q.
    worst_rise = -np.inf
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        image = rng.uniform(0, 255, (8, 8, 3))
        w = -rng.dirichlet([1.0, 1.0]) * rng.uniform(0.2, 1.0)
        model = _random_model(rng, w, Compatibility(FULL, -np.eye(3)))
        feats, plans = model.features(image), model.plans(image)
        u = rng.normal(size=(8, 8, 3)) * 2
        q = mf_init(u)
        prev = variational_objective(q, u, model, feats)
        for _ in range(10):
            q = mf_step_parallel(q, u, model, plans)
            cur = variational_objective(q, u, model, feats)
            worst_rise = max(worst_rise, cur - prev)
            prev = cur
    ok = worst_rise <= 1e-12
    assert report(4, ok, f"20 instances x 10 parallel steps; largest objective change {worst_rise:.2e} (must be <= 0)")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_kl_nonnegative_and_decreasing(report):
    worst_kl = np.inf
    worst_rise = -np.inf
    total_drop = []
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        image = rng.uniform(0, 255, (1, 3, 3))
        a = rng.normal(size=(3, 3))
        model = _random_model(rng, rng.uniform(-1.5, 1.5, 2), Compatibility(FULL, (a + a.T) / 2))
        feats = model.features(image)
        u = rng.normal(size=(1, 3, 3))
        _, log_z = enumerate_distribution(u, model, feats)
        q = mf_init(u)
        kls = [variational_objective(q, u, model, feats) + log_z]
        for _ in range(10):
            q = mf_step_sequential(q, u, model, feats)
            kls.append(variational_objective(q, u, model, feats) + log_z)
        worst_kl = min(worst_kl, min(kls))
        worst_rise = max(worst_rise, max(b - a for a, b in zip(kls, kls[1:])))
        total_drop.append(kls[0] - kls[-1])
    ok = worst_kl >= -1e-10 and worst_rise <= 1e-12
    assert report(5, ok, f"min KL {worst_kl:.2e} (limit -1e-10); largest rise per sweep {worst_rise:.1e}; "
                         f"mean total decrease {np.mean(total_drop):.3e}")


# -- 6 ------------------------------------------------------------------------

def _scalar_filter(feats, spec, v):
    n = feats.n
    vf = v.reshape(n, -1)
    inv = 1.0 / np.asarray(spec.sigma)
    out = np.zeros_like(vf)
    for i in range(n):
        for j in range(n):
            d = (feats.values[i] - feats.values[j]) * inv
            k = np.exp(-0.5 * float(d @ d))
            for l in range(vf.shape[1]):
                out[i, l] += k * vf[j, l]
    return out.reshape(v.shape)


def _exponent(rows, key):
    n = np.array([r["N"] for r in rows], dtype=np.float64)
    t = np.array([r[key] for r in rows])
    return float(np.polyfit(np.log(n), np.log(t), 1)[0])


def test_criterion_6_filtering(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    image = rng.uniform(0, 255, (16, 16, 3))
    v = rng.random((16, 16, 3))
    brute_gap = 0.0
    for kind, sigma in ((SPATIAL, (3.0, 4.0)), (BILATERAL, (5.0, 6.0, 20.0, 25.0, 30.0))):
        feats = build_features(image, kind)
        spec = KernelSpec(kind, sigma)
        brute_gap = max(brute_gap, float(np.abs(apply_filter(build_plan(feats, spec), v)
                                                - _scalar_filter(feats, spec, v)).max()))
    errors = []
    for seed in range(20):
        r = np.random.default_rng(600 + seed)
        img = r.uniform(0, 255, (64, 64, 3))
        ss, sc = r.uniform(3, 30), r.uniform(5, 50)
        spec = KernelSpec(BILATERAL, (ss, ss, sc, sc, sc))
        feats = build_features(img, BILATERAL)
        vals = r.random((64, 64, 3))
        exact = apply_filter(build_plan(feats, spec, "brute"), vals)
        approx = apply_filter(build_plan(feats, spec, "lattice"), vals)
        errors.append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    rows = bench_filter([64, 128, 192])
    e_lat, e_brute = _exponent(rows, "lattice_ms"), _exponent(rows, "brute_ms")
    elapsed = time.perf_counter() - t0
    ok = brute_gap <= 1e-10 and max(errors) < 0.05 and e_lat < 1.3 and e_brute > 1.8 and elapsed < 180
    assert report(6, ok, f"brute vs scalar {brute_gap:.1e} (limit 1e-10); lattice rel L2 max {max(errors):.4f} "
                         f"mean {np.mean(errors):.4f} over 20 (limit 0.05); time exponents lattice {e_lat:.2f} "
                         f"(< 1.3) brute {e_brute:.2f} (> 1.8); {elapsed:.1f}s (limit 180s)")


# -- 7 and 9 ------------------------------------------------------------------

TRAIN_CONFIG = {"labels": 4, "unary": "convnet", "optimizer": {"lr_top": 0.1, "lr_body": 0.05},
                "training": {"epochs": 12, "batch_size": 20, "seed": 0}}


def _pipeline(root):
    """synth -> unary training -> joint training resumed from the unary checkpoint -> eval."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TRAIN_CONFIG))
    data, unary, joint = root / "data", root / "unary", root / "joint"
    t0 = time.perf_counter()
    codes = [main(["synth", str(data), "--count", "200", "--val-count", "50", "--size", "64",
                   "--labels", "4", "--noise", "25", "--seed", "0"])]
    common = ["--config", str(cfg), "--data", str(data / "train.txt"), "--val", str(data / "val.txt")]
    codes.append(main(["train", *common, "--out", str(unary), "--stage", "unary"]))
    codes.append(main(["train", *common, "--out", str(joint), "--stage", "joint", "--epochs", "2",
                       "--resume", str(unary / "last.dcrf")]))
    elapsed = time.perf_counter() - t0
    codes.append(main(["eval", str(unary / "last.dcrf"), str(data / "val.txt"), "--out", str(root / "unary_iou.csv")]))
    codes.append(main(["eval", str(joint / "last.dcrf"), str(data / "val.txt"), "--out", str(root / "joint_iou.csv")]))
    return {"root": root, "codes": codes, "elapsed": elapsed}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    return _pipeline(base / "first"), _pipeline(base / "second")


def _mean_iou(path):
    with open(path, newline="") as fh:
        return float([r for r in csv.DictReader(fh) if r["class_id"] == "mean"][0]["iou"])


def _train_losses(path):
    with open(path, newline="") as fh:
        return [float(r["train_loss"]) for r in csv.DictReader(fh)]


def _monotone_within(losses, slack):
    return all(b <= a * (1 + slack) for a, b in zip(losses, losses[1:]))


def test_criterion_7_end_to_end_training(runs, report):
    run = runs[0]
    root = run["root"]
    unary_miou, joint_miou = _mean_iou(root / "unary_iou.csv"), _mean_iou(root / "joint_iou.csv")
    lu = _train_losses(root / "unary" / "log_unary.csv")
    lj = _train_losses(root / "joint" / "log_joint.csv")
    ok = (all(c == 0 for c in run["codes"]) and joint_miou > unary_miou and run["elapsed"] < 1800
          and len(lu) == 12 and len(lj) == 2 and _monotone_within(lu, 0.05) and _monotone_within(lj, 0.05))
    assert report(7, ok, f"val mIoU unary {unary_miou:.4f} -> joint {joint_miou:.4f}; "
                         f"unary losses {', '.join(f'{x:.3f}' for x in lu)}; joint losses "
                         f"{', '.join(f'{x:.4f}' for x in lj)} (5% slack); {run['elapsed'] / 60:.1f} min (limit 30)")


def test_criterion_8_not_reproducible(capsys):
    with capsys.disabled():
        print("\n[NOT REPRODUCIBLE] criterion 8: per-class VOC scores, the unary-only VOC figure and the "
              "iteration curves need VOC data, a pretrained 16-layer network and GPU training; "
              "criteria 1-7 stand in for them here.", flush=True)
    pytest.skip("needs VOC data, a pretrained 16-layer network and GPU training")


def _artifacts(root):
    names = ["data/train.txt", "data/val.txt", "unary/log_unary.csv", "unary/last.dcrf", "unary/best.dcrf",
             "joint/log_joint.csv", "joint/last.dcrf", "joint/best.dcrf", "unary_iou.csv", "joint_iou.csv"]
    return {n: (root / n).read_bytes() for n in names}


def test_criterion_9_determinism(runs, report):
    first, second = (_artifacts(r["root"]) for r in runs)
    differ = [n for n in first if first[n] != second[n]]
    ok = not differ
    assert report(9, ok, f"{len(first)} logs, checkpoints and manifests compared byte for byte; "
                         f"{'all identical' if ok else 'differ: ' + ', '.join(differ)}")
