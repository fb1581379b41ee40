"""Per-class accuracy, group accuracy and the fairness variance."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LITERAL = "literal"  # TP_j / (TP_j + TN_j + FP_j + FN_j), i.e. over all samples
RECALL = "recall"    # TP_j / (TP_j + FN_j)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.tn[0] + self.fp[0] + self.fn[0]) if len(self.tp) else 0


def confusion(predictions, labels, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    for name, v in (("label", lab), ("prediction", pred)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} out of range for {num_classes} classes")
    hit = pred == lab
    tp = np.bincount(lab[hit], minlength=num_classes)
    fn = np.bincount(lab, minlength=num_classes) - tp
    fp = np.bincount(pred, minlength=num_classes) - tp
    tn = len(lab) - tp - fn - fp
    return ConfusionCounts(tp, tn, fp, fn)


def per_class_accuracy(counts: ConfusionCounts, mode: str = LITERAL) -> np.ndarray:
    if mode == LITERAL:
        den = counts.tp + counts.tn + counts.fp + counts.fn
    elif mode == RECALL:
        den = counts.tp + counts.fn
    else:
        raise ValueError(f"unknown accuracy mode {mode!r}")
    if np.any(den == 0):
        log.info("per-class accuracy: %d classes have a zero denominator, reported as 0", int(np.sum(den == 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(den > 0, counts.tp / np.maximum(den, 1), 0.0)
    return acc.astype(np.float64)


def group_accuracy(per_class, class_counts) -> float:
    """Per-class accuracy weighted by the class occurrence in the group's data."""
    w = np.asarray(class_counts, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("group evaluation set is empty")
    return float(np.dot(w, np.asarray(per_class, dtype=np.float64)) / w.sum())


def fairness_variance(group_accuracies) -> float:
    g = np.asarray(group_accuracies, dtype=np.float64)
    if g.size < 2:
        raise ValueError("fairness variance needs at least two groups")
    return float(g.var())


@dataclass
class MetricsReport:
    top1: float
    per_class: list
    group_accuracy: list = field(default_factory=list)
    variance: float = 0.0
    mode: str = LITERAL

    def to_dict(self) -> dict:
        return {"top1": self.top1, "per_class": list(self.per_class), "group_accuracy": list(self.group_accuracy),
                "variance": self.variance, "mode": self.mode}


def evaluate(predictions, labels, num_classes: int, group_counts=(), mode: str = LITERAL) -> MetricsReport:
    counts = confusion(predictions, labels, num_classes)
    pc = per_class_accuracy(counts, mode)
    top1 = float(counts.tp.sum() / max(len(labels), 1))
    ga = [group_accuracy(pc, c) for c in group_counts if np.sum(c) > 0]
    var = fairness_variance(ga) if len(ga) >= 2 else 0.0
    return MetricsReport(top1, pc.tolist(), ga, var, mode)
