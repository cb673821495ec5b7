"""Epoch loop, evaluation and prediction shared by the CLI and the tests."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import TrainingState
from .config import RunConfig
from .core import argmax_labeling, softmax_normalize
from .data_io import make_batches
from .learning import loss_nll, train_step
from .meanfield import mf_infer
from .metrics import accumulate, confusion, mean_iou
from .unary import make_provider

log = logging.getLogger(__name__)

UNARY = "unary"
JOINT = "joint"


def worker_count() -> int:
    """DCRF_THREADS caps the number of per-sample workers; 0 or unset means one per CPU."""
    raw = os.environ.get("DCRF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DCRF_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("DCRF_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def init_state(cfg: RunConfig, train_images) -> TrainingState:
    provider = make_provider(cfg.unary, cfg.labels, seed=cfg.training.seed)
    provider.mean, provider.std = type(provider).fit_stats(train_images)
    model = cfg.model()
    return TrainingState(cfg, provider, model, cfg.optim_state(provider, model))


def predict(state: TrainingState, image, crf: bool):
    """Final marginals for one image, with or without the CRF."""
    scores = state.provider.clone().forward(image)
    model = state.model
    if not crf or model.num_kernels == 0:
        return softmax_normalize(scores)
    plans = model.plans(image, state.config.crf.filter_mode)
    return mf_infer(scores, model, plans, state.config.mf_config()).final


def evaluate(state: TrainingState, samples, crf: bool):
    """(confusion matrix, mean loss) over samples."""
    cm = confusion(state.config.labels)
    losses = []
    for s in samples:
        q = predict(state, s.image, crf)
        accumulate(cm, s.labels, argmax_labeling(q))
        rep = loss_nll(q, s.labels, reduction=state.config.loss)
        if rep.counted_pixels:
            losses.append(rep.value)
    return cm, float(np.mean(losses)) if losses else float("nan")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    skipped: int


def run_epoch(state: TrainingState, samples, stage: str, executor=None) -> tuple:
    cfg = state.config
    opts = cfg.train_options(stage)
    losses = []
    skipped = 0
    for idx in make_batches(len(samples), cfg.training.batch_size, cfg.training.seed, state.epoch):
        batch = [(samples[i].image, samples[i].labels) for i in idx]
        res = train_step(batch, state.provider, state.model, state.optim, opts, executor)
        losses.append(res.loss)
        skipped += res.skipped
        state.step += 1
    state.epoch += 1
    return float(np.mean(losses)), skipped


def train(state: TrainingState, train_samples, val_samples, stage: str, epochs: int, on_epoch=None):
    """Run ``epochs`` epochs; ``on_epoch(state, record, improved)`` is called after each."""
    crf = stage == JOINT and state.config.crf.enabled
    records = []
    workers = worker_count()
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for _ in range(epochs):
            train_loss, skipped = run_epoch(state, train_samples, stage, executor)
            if val_samples:
                cm, val_loss = evaluate(state, val_samples, crf)
                miou = mean_iou(cm)
            else:
                val_loss, miou = float("nan"), float("nan")
            rec = EpochRecord(state.epoch, train_loss, val_loss, miou, skipped)
            improved = not np.isnan(miou) and miou > state.best_miou
            if improved:
                state.best_miou = miou
            records.append(rec)
            log.info("epoch %d train %.5f val %.5f miou %.4f", rec.epoch, train_loss, val_loss, miou)
            if on_epoch is not None:
                on_epoch(state, rec, improved)
    finally:
        if executor is not None:
            executor.shutdown()
    return records
