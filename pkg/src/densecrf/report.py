"""Figures written next to the CSV outputs (PNG, Agg backend)."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# No timestamps or version strings, so reruns give identical files.
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", dpi=100, metadata=_META)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def training_curves(records, path, title="training"):
    epochs = [r.epoch for r in records]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(epochs, [r.train_loss for r in records], "o-", label="train")
    a.plot(epochs, [r.val_loss for r in records], "s--", label="val")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(epochs, [r.val_miou for r in records], "o-", color="C2")
    b.set_xlabel("epoch")
    b.set_ylabel("val mean IoU")
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def iou_bars(names, iou, path):
    iou = np.asarray(iou, dtype=float)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.5))
    ax.bar(range(len(names)), np.nan_to_num(iou), color="C0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    fig.tight_layout()
    _save(fig, path)


def bench_plot(rows, path):
    n = [r["N"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(n, [r["brute_ms"] for r in rows], "o-", label="brute")
    ax.loglog(n, [r["lattice_ms"] for r in rows], "s-", label="lattice")
    ax.set_xlabel("pixels N")
    ax.set_ylabel("time per filter (ms)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
