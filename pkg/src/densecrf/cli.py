"""Command-line interface: train, infer, eval, gradcheck, bench-filter, synth."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .core import argmax_labeling
from .data_io import DataError, atomic_write_bytes, read_manifest, read_ppm, synth_dataset, write_pgm, write_ppm
from .filtering import BILATERAL, FilterError, KernelSpec, apply_filter, build_features, build_plan
from .gradcheck import check_instance, random_instance, summarize
from .metrics import iou_per_class, mean_iou
from .trainer import JOINT, UNARY, evaluate, init_state, predict, train

log = logging.getLogger("densecrf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


def palette() -> np.ndarray:
    """Fixed 256-entry colour table (bit-interleaved, as in common segmentation tools)."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for shift in range(7, -1, -1):
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from . import report

    cfg = load_config(args.config) if args.config else RunConfig().validate()
    train_man = read_manifest(args.data, split="train")
    train_samples = train_man.load_all()
    val_samples = read_manifest(args.val, split="val").load_all() if args.val else []
    for s in train_samples + val_samples:
        if s.labels[s.labels != 255].max(initial=0) >= cfg.labels:
            raise DataError(f"label map holds labels >= {cfg.labels}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = args.stage

    if args.resume:
        ck = ckpt_io.load(args.resume)
        prev_stage = ck.meta.get("stage", stage)
        state = ckpt_io.unpack_state(ck, cfg, crf_from_config=(prev_stage == UNARY and stage == JOINT))
        if prev_stage != stage:
            # A new stage counts its own epochs and best score.
            state.epoch = state.step = 0
            state.best_miou = float("-inf")
    else:
        state = init_state(cfg, [s.image for s in train_samples])

    meta = {"stage": stage}
    ckpt_io.save(out / "last.dcrf", ckpt_io.pack_state(state, meta))
    if not (out / "best.dcrf").exists() or not args.resume:
        ckpt_io.save(out / "best.dcrf", ckpt_io.pack_state(state, meta))

    log_path = out / f"log_{stage}.csv"
    header = ["epoch", "train_loss", "val_loss", "val_miou", "skipped_steps"]
    rows = []
    if args.resume and log_path.exists() and state.epoch > 0:
        with open(log_path, newline="") as fh:
            rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= state.epoch]

    records = []

    def on_epoch(st, rec, improved):
        records.append(rec)
        rows.append([rec.epoch, _fmt(rec.train_loss), _fmt(rec.val_loss), _fmt(rec.val_miou), rec.skipped])
        write_csv(log_path, header, rows)
        ck = ckpt_io.pack_state(st, meta)
        ckpt_io.save(out / "last.dcrf", ck)
        if improved:
            ckpt_io.save(out / "best.dcrf", ck)
        print(f"[{stage}] epoch {rec.epoch}: train {rec.train_loss:.5f} val {rec.val_loss:.5f} "
              f"mIoU {rec.val_miou:.4f}" + (f" ({rec.skipped} skipped)" if rec.skipped else ""), flush=True)

    epochs = cfg.training.epochs if args.epochs is None else args.epochs
    train(state, train_samples, val_samples, stage, epochs, on_epoch)
    write_csv(log_path, header, rows)
    if records:
        report.training_curves(records, out / f"curves_{stage}.png", title=f"stage {stage}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer / eval


def _load_state(path):
    ck = ckpt_io.load(path)
    return ckpt_io.unpack_state(ck), ck.meta.get("stage", JOINT)


def _use_crf(state, stage, flag):
    if flag is not None:
        return flag
    return stage == JOINT and state.config.crf.enabled


def cmd_infer(args) -> int:
    state, stage = _load_state(args.checkpoint)
    image = read_ppm(args.image)
    try:
        q = predict(state, image, _use_crf(state, stage, args.crf))
    except FilterError as exc:
        raise DataError(str(exc)) from exc
    labels = argmax_labeling(q).astype(np.uint8)
    conf = np.clip(np.rint(q.max(axis=-1) * 255.0), 0, 255).astype(np.uint8)
    overlay = np.rint(0.5 * image.astype(np.float64) + 0.5 * palette()[labels]).astype(np.uint8)
    prefix = str(args.out_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(prefix + "_labels.pgm", labels)
    write_pgm(prefix + "_confidence.pgm", conf)
    write_ppm(prefix + "_overlay.ppm", overlay)
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import report

    state, stage = _load_state(args.checkpoint)
    samples = read_manifest(args.manifest).load_all()
    cm, _ = evaluate(state, samples, _use_crf(state, stage, args.crf))
    iou = iou_per_class(cm)
    names = state.config.names()
    rows = [[c, names[c], _fmt(iou[c])] for c in range(len(iou))]
    rows.append(["mean", "mean", _fmt(mean_iou(cm))])
    write_csv(args.out, ["class_id", "class_name", "iou"], rows)
    if args.figure:
        report.iou_bars(names, iou, args.figure)
    print(f"mean IoU {mean_iou(cm):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    compat = "potts" if args.potts else "full"
    if args.config:
        cfg = load_config(args.config)
        labels, unary, iters = cfg.labels, cfg.unary, cfg.crf.iterations
    else:
        labels, unary, iters = 3, "convnet", 3
    rows = []
    for k in range(args.instances):
        inst = random_instance(seed=args.seed + k, size=args.size, num_labels=labels,
                               iterations=iters, unary=unary, compat=compat)
        rows.extend(check_instance(inst, seed=args.seed + k))
    print(f"{'group':<12} {'analytic':>14} {'numeric':>14} {'rel_error':>10}  worst entry")
    for r in summarize(rows):
        print(f"{r.group:<12} {r.analytic:>14.6e} {r.numeric:>14.6e} {r.rel_error:>10.2e}  {r.name}")
    bad = [r for r in rows if not r.ok]
    print(f"{len(rows)} checks, {len(bad)} failed, max rel error {max(r.rel_error for r in rows):.2e}")
    return EXIT_CHECK if bad else EXIT_OK


# ---------------------------------------------------------------------------
# bench-filter


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_filter(sizes, labels=4, seed=0, repeats=1, sigma=(10.0, 10.0, 20.0, 20.0, 20.0)):
    """Per size: build plus one filtering pass for both filters, and their relative L2 gap."""
    rng = np.random.default_rng(seed)
    spec = KernelSpec(BILATERAL, tuple(sigma))
    rows = []
    for s in sizes:
        img = rng.uniform(0, 255, (s, s, 3))
        vals = rng.random((s, s, labels))
        feats = build_features(img, BILATERAL)
        out = {}

        def run(mode):
            out[mode] = apply_filter(build_plan(feats, spec, mode), vals)

        tb = _time(lambda: run("brute"), repeats)
        tl = _time(lambda: run("lattice"), repeats)
        err = np.linalg.norm(out["lattice"] - out["brute"]) / np.linalg.norm(out["brute"])
        rows.append({"N": s * s, "d": feats.dim, "brute_ms": 1e3 * tb, "lattice_ms": 1e3 * tl,
                     "rel_l2_error": float(err)})
    return rows


def cmd_bench_filter(args) -> int:
    from . import report

    rows = bench_filter(args.sizes, labels=args.labels, seed=args.seed, repeats=args.repeats)
    header = ["N", "d", "brute_ms", "lattice_ms", "rel_l2_error"]
    body = [[r["N"], r["d"], f"{r['brute_ms']:.3f}", f"{r['lattice_ms']:.3f}", f"{r['rel_l2_error']:.6f}"]
            for r in rows]
    if args.out:
        write_csv(args.out, header, body)
        report.bench_plot(rows, Path(args.out).with_suffix(".png"))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    train_man = synth_dataset(args.out, args.count, args.size, args.labels, args.noise, args.seed, split="train")
    msg = f"wrote {len(train_man)} training samples"
    if args.val_count:
        val_man = synth_dataset(args.out, args.val_count, args.size, args.labels, args.noise,
                                args.seed + 1_000_003, split="val")
        msg += f" and {len(val_man)} validation samples"
    print(f"{msg} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densecrf", description="Dense CRF segmentation with learned parameters.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train unary (and CRF) parameters")
    t.add_argument("--config", help="JSON run config (defaults if omitted)")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--val", help="validation manifest")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--stage", choices=[UNARY, JOINT], default=JOINT)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override training.epochs")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="label one PPM image")
    i.add_argument("checkpoint")
    i.add_argument("image")
    i.add_argument("out_prefix")
    i.add_argument("--crf", dest="crf", action="store_true", default=None)
    i.add_argument("--no-crf", dest="crf", action="store_false")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-class IoU over a manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--figure", help="optional PNG of per-class IoU")
    e.add_argument("--crf", dest="crf", action="store_true", default=None)
    e.add_argument("--no-crf", dest="crf", action="store_false")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=5)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--potts", action="store_true", help="Potts compatibility (no mu check)")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench-filter", help="time brute vs lattice bilateral filtering")
    b.add_argument("sizes", type=int, nargs="+", help="image side lengths")
    b.add_argument("--labels", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", help="CSV path (a PNG is written next to it)")
    b.set_defaults(func=cmd_bench_filter)

    s = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--val-count", type=int, default=50)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--labels", type=int, default=4)
    s.add_argument("--noise", type=float, default=25.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FilterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
