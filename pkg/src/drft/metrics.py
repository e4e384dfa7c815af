"""Temporal IoU, recall at IoU thresholds and mean IoU."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

THRESHOLDS = (0.3, 0.5, 0.7)


def _as_pair(x):
    if hasattr(x, "as_tuple"):
        return x.as_tuple()
    return tuple(x)


def tiou(a, b):
    """IoU of two intervals on the real line.

    Two zero-length intervals count as 1 when they coincide and 0 otherwise.
    """
    a, b = _as_pair(a), _as_pair(b)
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0.0:
        return 1.0 if a[0] == b[0] else 0.0
    return inter / union


def tiou_batch(preds, gts):
    """Vectorized tIoU of matching rows of two (n, 2) arrays."""
    return kernels.tiou(np.asarray(preds, dtype=np.float64), np.asarray(gts, dtype=np.float64))


def _ious(pairs):
    if len(pairs) == 0:
        raise ValueError("need at least one (prediction, ground truth) pair")
    preds = np.array([_as_pair(p) for p, _ in pairs], dtype=np.float64)
    gts = np.array([_as_pair(g) for _, g in pairs], dtype=np.float64)
    return tiou_batch(preds, gts)


def recall_from_ious(ious, theta):
    ious = np.asarray(ious)
    if ious.size == 0:
        raise ValueError("need at least one IoU value")
    return 100.0 * np.count_nonzero(ious >= theta) / ious.size


def mean_from_ious(ious):
    ious = np.asarray(ious)
    if ious.size == 0:
        raise ValueError("need at least one IoU value")
    # correctly rounded sum, so the result does not depend on summation order
    return 100.0 * (math.fsum(ious.tolist()) / ious.size)


def recall_at(pairs, theta):
    """Percentage of pairs whose tIoU is at least ``theta``."""
    return recall_from_ious(_ious(pairs), theta)


def mean_tiou(pairs):
    return mean_from_ious(_ious(pairs))


@dataclass
class EvalResult:
    recall_at: dict
    mean_tiou: float
    count: int
    per_category: dict = field(default_factory=dict)  # label -> EvalResult


def evaluate(preds, gts, labels=None, thresholds=THRESHOLDS):
    ious = tiou_batch(preds, gts)
    result = EvalResult(
        {t: recall_from_ious(ious, t) for t in thresholds}, mean_from_ious(ious), int(ious.size)
    )
    if labels is not None:
        labels = np.asarray(labels)
        for lab in sorted(set(labels.tolist())):
            sel = ious[labels == lab]
            result.per_category[lab] = EvalResult(
                {t: recall_from_ious(sel, t) for t in thresholds}, mean_from_ious(sel), int(sel.size)
            )
    return result


def write_eval_csv(path, split, result, weights_by_category=None, weight_names=None,
                   category_names=None):
    """One row per (split, ALL or category). Percentages use two decimals."""
    weight_names = list(weight_names or [])
    thresholds = sorted(result.recall_at)
    header = ["split", "category"] + [f"R@{t}" for t in thresholds] + ["mIoU", "count"]
    header += [f"w_{n}" for n in weight_names]
    rows = []

    def row(cat, r, w):
        out = [split, cat] + [f"{r.recall_at[t]:.2f}" for t in thresholds]
        out += [f"{r.mean_tiou:.2f}", str(r.count)]
        if weight_names:
            out += [f"{x:.4f}" for x in w]
        return out

    all_w = (weights_by_category or {}).get("ALL")
    rows.append(row("ALL", result, all_w))
    for lab, r in result.per_category.items():
        name = (category_names or {}).get(lab, str(lab))
        rows.append(row(name, r, (weights_by_category or {}).get(lab)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return header, rows
