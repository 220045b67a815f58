"""Segmentation scores, PR/F-threshold curves and error-map rendering.

Conventions: confusion rows are ground truth and columns are predictions.
Precision, recall, F-score and IoU are 0 when their denominator is 0. A
class absent from both prediction and ground truth is left out of the class
means (its per-class entries are NaN).
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

CURVE_HEADER = ("threshold", "precision", "recall", "fscore")
TP_COLOR = (255, 255, 255)
FN_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} values must lie in [0, {num_classes})")
    flat = gt.ravel() * num_classes + pred.ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def binary_scores(tp, fp, fn) -> dict:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return {
        "precision": p,
        "recall": r,
        "fscore": _ratio(2 * p * r, p + r),
        "iou": _ratio(tp, tp + fp + fn),
    }


def scores(m: np.ndarray) -> dict:
    """Per-class precision/recall/F-score/IoU and their unweighted means.

    ``mAcc`` is the mean per-class recall; ``aAcc`` is the overall pixel
    accuracy.
    """
    m = np.asarray(m, dtype=np.int64)
    tp = np.diag(m)
    fp = m.sum(0) - tp
    fn = m.sum(1) - tp
    valid = (m.sum(0) + m.sum(1)) > 0
    per = binary_scores(tp, fp, fn)
    per = {k: np.where(valid, v, np.nan) for k, v in per.items()}
    total = m.sum()

    def mean(v):
        return float(v[valid].mean()) if valid.any() else float("nan")

    return {
        "per_class": {k: v.tolist() for k, v in per.items()},
        "valid": valid.tolist(),
        "mIoU": mean(per["iou"]),
        "mAcc": mean(per["recall"]),
        "mFscore": mean(per["fscore"]),
        "mPrecision": mean(per["precision"]),
        "aAcc": float(tp.sum() / total) if total else float("nan"),
    }


def default_thresholds(n: int = 256) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def curve_counts(prob, gt, thresholds) -> np.ndarray:
    """(T, 3) counts of TP, FP, FN when predicting ``prob >= t`` for each threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    prob = np.asarray(prob, dtype=np.float64).ravel()
    gt = np.asarray(gt).ravel() > 0
    if prob.shape != gt.shape:
        raise ValueError(f"probability map size {prob.size} does not match ground truth size {gt.size}")
    pos = np.sort(prob[gt])
    neg = np.sort(prob[~gt])
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    return np.stack([tp, fp, len(pos) - tp], axis=1)


def curves_from_counts(counts, thresholds) -> np.ndarray:
    counts = np.asarray(counts)
    s = binary_scores(counts[:, 0], counts[:, 1], counts[:, 2])
    return np.stack([np.asarray(thresholds, dtype=np.float64), s["precision"], s["recall"], s["fscore"]], axis=1)


def pr_ft_curves(prob, gt, thresholds=None) -> np.ndarray:
    """Rows of (threshold, precision, recall, fscore) for the binarized map ``prob >= t``."""
    thresholds = default_thresholds() if thresholds is None else thresholds
    return curves_from_counts(curve_counts(prob, gt, thresholds), thresholds)


def write_curves(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for row in np.asarray(rows):
            writer.writerow([f"{v:.6f}" for v in row])


def error_map(pred, gt) -> tuple[np.ndarray, int]:
    """RGB rendering of defect-vs-background agreement and the error count FN + FP.

    White marks detected defect pixels, green marks missed ones (FN), red marks
    false detections (FP); correct background stays black.
    """
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    img = np.zeros(gt.shape + (3,), dtype=np.uint8)
    img[pred & gt] = TP_COLOR
    img[~pred & gt] = FN_COLOR
    img[pred & ~gt] = FP_COLOR
    return img, int((pred != gt).sum())
