"""Segmentation and classification metrics plus a long-format CSV writer."""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import precision_recall_fscore_support

CLASS_NAMES = ("normal", "benign", "malignant")


@dataclass(frozen=True)
class SegMetrics:
    iou: float
    dice: float
    sensitivity: float
    precision: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClfMetrics:
    accuracy: float
    macro_f1: float
    macro_auc: float
    macro_precision: float

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    # 0/0 only happens when every sample was an agreeing null mask
    return 1.0 if den == 0 else num / den


def seg_counts(pred_prob, target, threshold: float = 0.5):
    """Micro TP, FP, FN over the batch, skipping samples where both masks are empty."""
    pred_prob, target = np.asarray(pred_prob, dtype=float), np.asarray(target, dtype=float)
    if pred_prob.shape != target.shape:
        raise ValueError(f"seg_metrics: shape mismatch {pred_prob.shape} vs {target.shape}")
    if pred_prob.ndim < 2:
        pred_prob, target = pred_prob[None], target[None]
    pred = pred_prob >= threshold
    true = target >= 0.5
    n = pred.shape[0]
    pred, true = pred.reshape(n, -1), true.reshape(n, -1)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    return tp, fp, fn


def seg_metrics(pred_prob, target, threshold: float = 0.5) -> SegMetrics:
    """IoU, Dice, sensitivity and precision from micro-aggregated pixel counts.

    The leading axis indexes samples.  A sample whose target and thresholded
    prediction are both empty adds nothing, which is the same as skipping it
    since it only has true negatives.
    """
    tp, fp, fn = seg_counts(pred_prob, target, threshold)
    return SegMetrics(
        iou=_ratio(tp, tp + fp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
    )


def binary_auc(scores, positive) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted 0.5."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary_auc: need at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks give the 0.5 tie credit
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def clf_metrics(probs, labels, num_classes: int = 3) -> ClfMetrics:
    """Accuracy plus macro F1, one-vs-rest AUC and precision over present classes."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels).astype(int)
    if probs.ndim != 2 or probs.shape != (labels.shape[0], num_classes):
        raise ValueError(f"clf_metrics: expected probs ({labels.shape[0]}, {num_classes}), got {probs.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("clf_metrics: probability rows must sum to 1 within 1e-6")
    pred = probs.argmax(axis=1)
    present = [c for c in range(num_classes) if np.any(labels == c)]
    missing = sorted(set(range(num_classes)) - set(present))
    if missing:
        warnings.warn(f"clf_metrics: classes {missing} absent from labels; excluded from macro averages",
                      stacklevel=2)
    prec, _, f1, _ = precision_recall_fscore_support(labels, pred, labels=present, average=None, zero_division=0)
    aucs = []
    for c in present:
        pos = labels == c
        # a single-class label set has no negatives; the ranking is then vacuous
        aucs.append(binary_auc(probs[:, c], pos) if (~pos).any() else 1.0)
    return ClfMetrics(
        accuracy=float(np.mean(pred == labels)),
        macro_f1=float(np.mean(f1)),
        macro_auc=float(np.mean(aucs)),
        macro_precision=float(np.mean(prec)),
    )


METRIC_CSV_HEADER = ("run_id", "epoch", "split", "metric", "value")


def metric_rows(run_id: str, epoch: int, split: str, *groups) -> list[tuple]:
    rows = []
    for group in groups:
        for name, value in group.as_dict().items():
            rows.append((run_id, epoch, split, name, repr(float(value))))
    return rows


def write_metrics_csv(path, rows: Iterable[tuple], append: bool = False) -> Path:
    path = Path(path)
    exists = append and path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(METRIC_CSV_HEADER)
        w.writerows(rows)
    return path
