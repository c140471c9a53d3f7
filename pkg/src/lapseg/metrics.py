"""Pixel-level evaluation: confusion accumulation and the four derived
metrics (precision, recall, F1, IoU), macro-averaged over classes."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError

IGNORE_LABEL = 255


class ConfusionMatrix:
    """n x n pixel counts; entry (t, p) counts true class t predicted p.

    Accumulation is associative and order-independent, and matrices from
    parallel workers merge by elementwise addition.
    """

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, predicted, truth):
        predicted = np.asarray(predicted)
        truth = np.asarray(truth)
        if predicted.shape != truth.shape:
            raise DimensionError(
                f"prediction shape {predicted.shape} != truth shape {truth.shape}"
            )
        valid = truth != IGNORE_LABEL
        t = truth[valid].astype(np.int64)
        p = predicted[valid].astype(np.int64)
        n = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= n or p.min() < 0 or p.max() >= n):
            raise DimensionError("label outside the class range")
        self.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    iou: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple
    average: ClassMetrics


def class_metrics(cm, c):
    """Metrics for one class from shared TP/FP/FN counts.

    A class absent from both prediction and truth scores 1.0 across the
    board (nothing to get wrong); empty single denominators score 0.0.
    """
    counts = cm.counts
    tp = float(counts[c, c])
    fn = float(counts[c, :].sum()) - tp
    fp = float(counts[:, c].sum()) - tp
    if tp + fp + fn == 0:
        return ClassMetrics(1.0, 1.0, 1.0, 1.0)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou = tp / (tp + fp + fn)
    return ClassMetrics(precision, recall, f1, iou)


def macro_average(values):
    """Unweighted arithmetic mean over classes."""
    values = list(values)
    if not values:
        raise ContractError("macro average over an empty class list")
    return float(sum(values)) / len(values)


def report_from_confusion(cm):
    per_class = tuple(class_metrics(cm, c) for c in range(cm.num_classes))
    avg = ClassMetrics(
        macro_average(m.precision for m in per_class),
        macro_average(m.recall for m in per_class),
        macro_average(m.f1 for m in per_class),
        macro_average(m.iou for m in per_class),
    )
    return MetricsReport(per_class, avg)


def format_report(report, class_names):
    """Tables-shaped text: one row per class plus an average row, with
    percentages to two decimals in the order precision, recall, F1, IoU."""
    width = max(len(n) for n in list(class_names) + ["average"]) + 2
    lines = [
        f"{'class':<{width}}{'precision (%)':>15}{'recall (%)':>12}{'f1-score (%)':>14}{'iou (%)':>9}"
    ]
    rows = list(zip(class_names, report.per_class)) + [("average", report.average)]
    for name, m in rows:
        lines.append(
            f"{name:<{width}}{m.precision * 100:>15.2f}{m.recall * 100:>12.2f}"
            f"{m.f1 * 100:>14.2f}{m.iou * 100:>9.2f}"
        )
    return "\n".join(lines) + "\n"


def predict_labels(scores):
    """Argmax over the class axis; ties resolve to the lowest index."""
    return np.argmax(scores, axis=1).astype(np.int64)


def evaluate_samples(model, samples, batch_size=8):
    """Single confusion matrix over preloaded samples, then the report."""
    cm = ConfusionMatrix(model.classes)
    model.eval()
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([s.image for s in chunk])
            masks = np.stack([s.mask for s in chunk])
            with T.no_grad():
                scores = model(T.Tensor(images))
            cm.add(predict_labels(scores.data), masks)
    finally:
        model.train()
    return report_from_confusion(cm), cm


def evaluate_records(model, records, class_map, batch_size=8):
    """Single confusion matrix over all records, then the derived report.

    Samples load at the model's declared resolution (masks resized with
    nearest neighbour); any unreadable sample fails the whole evaluation.
    """
    from .data import load_sample

    cm = ConfusionMatrix(model.classes)
    model.eval()
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            samples = [load_sample(r, class_map, target_size=model.resolution) for r in chunk]
            images = np.stack([s.image for s in samples])
            masks = np.stack([s.mask for s in samples])
            with T.no_grad():
                scores = model(T.Tensor(images))
            cm.add(predict_labels(scores.data), masks)
    finally:
        model.train()
    return report_from_confusion(cm), cm
