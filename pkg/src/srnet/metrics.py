from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class MetricReport:
    accuracy: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]


def confusion_matrix(predictions, labels, n_classes: int | None = None) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    k = n_classes or int(max(predictions.max(), labels.max())) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def compute_metrics(predictions, labels, n_classes: int | None = None) -> MetricReport:
    """Accuracy and support-weighted F1; undefined ratios (0/0) count as 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if predictions.size == 0:
        raise ValueError("cannot score an empty prediction set")
    cm = confusion_matrix(predictions, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0)
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    weighted = float((f1 * support).sum() / support.sum())
    return MetricReport(
        accuracy=float(tp.sum() / cm.sum()),
        weighted_f1=weighted,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
    )


SELECTION_RULES = ("all_steps", "after_0.7_tmax")


def select_checkpoint(trajectory: Sequence[tuple[int, float]], rule: str = "all_steps",
                      t_max: int | None = None) -> int:
    """Step with the best ID dev metric among eligible (step, metric) points.

    ``after_0.7_tmax`` only considers steps >= 0.7 * t_max; if none qualify the
    whole trajectory is used.  Ties resolve to the earliest step.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    if rule not in SELECTION_RULES:
        raise ValueError(f"unknown selection rule {rule!r}")
    points = sorted(trajectory)
    if rule == "after_0.7_tmax":
        if t_max is None:
            t_max = points[-1][0]
        late = [p for p in points if p[0] >= 0.7 * t_max]
        points = late or points
    best_step, best = points[0]
    for step, value in points[1:]:
        if value > best:
            best_step, best = step, value
    return best_step


def plateau_step(trajectory: Sequence[tuple[int, float]], patience: int = 3, min_delta: float = 0.0) -> int | None:
    """First step at which the metric has not improved by ``min_delta`` for ``patience`` evaluations."""
    best = -np.inf
    since = 0
    for step, value in sorted(trajectory):
        if value > best + min_delta:
            best, since = value, 0
        else:
            since += 1
            if since >= patience:
                return step
    return None
