"""Confusion matrices, IoU and pseudo-label accuracy."""
from __future__ import annotations

import numpy as np

from .tensor_store import IGNORE


class UndefinedMetricError(ValueError):
    pass


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """counts[g, p] over pixels whose ground truth is not IGNORE."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    keep = gt != IGNORE
    idx = num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(cm) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-empty union; per-class IoU is NaN otherwise."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    scored = union > 0
    if not scored.any():
        raise UndefinedMetricError("no class appears in prediction or ground truth")
    iou = np.full(cm.shape[0], np.nan)
    iou[scored] = tp[scored] / union[scored]
    return float(iou[scored].mean()), iou


def pseudo_label_accuracy(pseudo, gt, flips=None) -> tuple[float, float | None]:
    """Accuracy on non-IGNORE pixels, and the fraction of ``flips`` now correct."""
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt)
    if pseudo.shape != gt.shape:
        raise ValueError(f"length mismatch {pseudo.shape} vs {gt.shape}")
    keep = gt != IGNORE
    acc = float((pseudo[keep] == gt[keep]).mean()) if keep.any() else float("nan")
    if flips is None:
        return acc, None
    flips = np.asarray(flips, dtype=np.int64)
    if flips.size == 0:
        return acc, float("nan")
    return acc, float((pseudo[flips] == gt[flips]).mean())
