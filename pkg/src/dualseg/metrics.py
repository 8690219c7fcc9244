"""Overlap metrics (percentages) and mean/std aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

METRIC_NAMES = ("dsc", "iou", "specificity", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int, empty_ok: bool) -> float:
    if den == 0:
        return 100.0 if empty_ok else 0.0
    return 100.0 * num / den


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, True)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, True)


def precision(c: ConfusionCounts) -> float:
    # no predicted foreground: perfect only if there was nothing to find
    return _ratio(c.tp, c.tp + c.fp, c.fn == 0)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c.fp == 0)


METRICS = {"dsc": dsc, "iou": iou, "specificity": specificity, "precision": precision, "recall": recall}


def score(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """All five metrics for one mask pair."""
    c = confusion(pred, gt)
    return {name: fn(c) for name, fn in METRICS.items()}


def aggregate(per_image: Sequence[Mapping[str, float]]) -> Dict[str, Dict[str, float]]:
    """Mean and population std of each metric: ``{metric: {mean, std, n}}``."""
    if len(per_image) == 0:
        raise ValueError("cannot aggregate an empty set of scores")
    report = {}
    for name in METRIC_NAMES:
        vals = np.array([float(s[name]) for s in per_image])
        report[name] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return report
