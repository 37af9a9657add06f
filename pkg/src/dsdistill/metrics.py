"""Segmentation metrics: confusion-matrix accumulation, per-class IoU,
mean IoU, and pixel accuracy.

cm[i, j] counts pixels of true class i predicted as class j; matrices from
multiple images simply add. Pixels labeled with the ignore value (255,
matching the usual unlabeled-pixel convention) are skipped.
"""

from __future__ import annotations

import numpy as np

IGNORE_LABEL = 255


class UndefinedMetricError(ValueError):
    """Raised when a metric is requested on an empty confusion matrix."""


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
              ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Confusion matrix of two equally shaped integer label maps."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    if np.any((gt[valid] < 0) | (gt[valid] >= num_classes)):
        raise ValueError(f"ground-truth label outside [0, {num_classes})")
    p = pred[valid]
    if np.any((p < 0) | (p >= num_classes)):
        raise ValueError(f"prediction label outside [0, {num_classes})")
    idx = num_classes * gt[valid].astype(np.int64) + p.astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class: cm[i,i] / (row_i + col_i - cm[i,i]). Classes absent
    from both prediction and ground truth get NaN."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes with a nonzero union (0/0 classes are
    excluded from the mean)."""
    iou = per_class_iou(cm)
    observed = ~np.isnan(iou)
    if not observed.any():
        raise UndefinedMetricError("confusion matrix has no observed classes")
    return float(iou[observed].mean())


def pixel_acc(cm: np.ndarray) -> float:
    """Fraction of correctly classified pixels: trace / total."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    return float(np.trace(cm) / total)
