"""Classification metrics and cross-seed summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    seed: int
    accuracy: float
    macro_f1: float
    partition_label: str
    model_label: str

    def __post_init__(self):
        for name in ("accuracy", "macro_f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class SeedSummary:
    mean: float
    std: float
    n_seeds: int

    def __str__(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


def _pair(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions ({p.shape}) and labels ({y.shape}) differ in length")
    if p.size == 0:
        raise ValueError("no predictions to score")
    return p, y


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return float(np.mean(p == y))


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p, y = _pair(predictions, labels)
    if y.min() < 0 or y.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValueError(f"class indices must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def macro_f1(predictions, labels, num_classes: int = 6) -> float:
    """Unweighted mean of per-class F1 over all ``num_classes`` classes.

    A class with no true and no predicted samples scores 0, as does any
    class whose precision and recall are both 0.
    """
    cm = confusion_matrix(predictions, labels, num_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


def aggregate_seeds(values) -> SeedSummary:
    """Mean and population standard deviation over per-seed values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    return SeedSummary(float(v.mean()), float(v.std()), int(v.size))
