"""Confusion matrices and intersection-over-union."""
from __future__ import annotations

import numpy as np

from .core import VOID


def confusion(num_labels: int) -> np.ndarray:
    return np.zeros((num_labels, num_labels), dtype=np.int64)


def accumulate(cm: np.ndarray, gt, pred, void=VOID) -> np.ndarray:
    """cm[gt, pred] += 1 for every non-void pixel; rows are ground truth."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    L = cm.shape[0]
    keep = gt != void
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= L or p.min() < 0 or p.max() >= L):
        raise ValueError(f"labels outside [0, {L})")
    cm += np.bincount(g * L + p, minlength=L * L).reshape(L, L)
    return cm


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN); NaN where the denominator is zero."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    out = np.full(tp.shape, np.nan)
    ok = denom > 0
    out[ok] = tp[ok] / denom[ok]
    return out


def mean_iou(cm: np.ndarray) -> float:
    iou = iou_per_class(cm)
    if np.all(np.isnan(iou)):
        return float("nan")
    return float(np.nanmean(iou))
