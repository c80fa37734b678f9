"""Classification and retrieval evaluation quantities.

Everything here is a pure function over counts. Degenerate divisions
(a class never predicted, a query with no relevant items) yield 0 plus an
explicit flag instead of NaN, so macro averages stay finite and the
degeneracy stays visible to callers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix; rows are true classes, columns predictions."""

    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InputError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise InputError("confusion matrix entries must be >= 0")
        if len(self.class_names) != c.shape[0]:
            raise InputError(
                f"{len(self.class_names)} class names for a "
                f"{c.shape[0]}-class matrix")

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())


def confusion_matrix(true_labels, predicted_labels, num_classes,
                     class_names=None):
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise InputError("label lists must be 1-D and equal length")
    for name, arr in (("true", true_labels), ("predicted", predicted_labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(
                f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    if class_names is None:
        class_names = tuple(str(i) for i in range(num_classes))
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


@dataclass(frozen=True)
class ClassificationReport:
    """Per-class precision/recall plus their macro averages.

    accuracy is the micro view (trace over total); macro_accuracy averages
    the per-class (TP+TN)/total form. The two coincide only for special
    matrices, so both are kept.
    """

    per_class_precision: tuple
    per_class_recall: tuple
    average_precision: float
    average_recall: float
    accuracy: float
    macro_accuracy: float
    f1: float
    zero_predicted_classes: tuple = field(default=())
    zero_support_classes: tuple = field(default=())


def classification_report(cm):
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise InputError("confusion matrix is empty")
    tp = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    fp = col - tp
    fn = row - tp
    tn = total - tp - fp - fn

    zero_pred = col == 0
    zero_supp = row == 0
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=~zero_pred)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=~zero_supp)

    ap = float(precision.mean())
    ar = float(recall.mean())
    f1 = 0.0 if ap + ar == 0 else 2.0 * ap * ar / (ap + ar)
    return ClassificationReport(
        per_class_precision=tuple(precision.tolist()),
        per_class_recall=tuple(recall.tolist()),
        average_precision=ap,
        average_recall=ar,
        accuracy=float(tp.sum() / total),
        macro_accuracy=float(((tp + tn) / total).mean()),
        f1=float(f1),
        zero_predicted_classes=tuple(np.flatnonzero(zero_pred).tolist()),
        zero_support_classes=tuple(np.flatnonzero(zero_supp).tolist()),
    )


def format_report(report, class_names):
    """Fixed-field-order text rendering of a ClassificationReport."""
    lines = ["class\tprecision\trecall"]
    for name, p, r in zip(class_names, report.per_class_precision,
                          report.per_class_recall):
        lines.append(f"{name}\t{p:.6f}\t{r:.6f}")
    lines.append(f"average_precision\t{report.average_precision:.6f}")
    lines.append(f"average_recall\t{report.average_recall:.6f}")
    lines.append(f"accuracy\t{report.accuracy:.6f}")
    lines.append(f"macro_accuracy\t{report.macro_accuracy:.6f}")
    lines.append(f"f1\t{report.f1:.6f}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) per rank cutoff k = 1..depth for one query.

    valid is False when the query had no relevant items in the database;
    such queries carry no usable recall and are skipped by averages.
    """

    points: tuple
    valid: bool = True

    def precision_at(self, k):
        return self.points[k - 1][1]

    def recall_at(self, k):
        return self.points[k - 1][0]


def _relevance(ranked_labels, query_label):
    return np.asarray([lbl == query_label for lbl in ranked_labels],
                      dtype=np.float64)


def retrieval_pr(ranked_labels, query_label, total_relevant):
    """Precision and recall at every cutoff of one ranked result list.

    ranked_labels are the true labels of the returned items, best first;
    an item is relevant when its label equals query_label. total_relevant
    counts relevant items in the whole database (the recall denominator).
    """
    if total_relevant < 0:
        raise InputError(f"total_relevant must be >= 0, got {total_relevant}")
    rel = _relevance(ranked_labels, query_label)
    hits = np.cumsum(rel)
    ks = np.arange(1, rel.size + 1, dtype=np.float64)
    precision = hits / ks
    if total_relevant == 0:
        return PRCurve(points=tuple(
            (0.0, float(p)) for p in precision), valid=False)
    recall = hits / total_relevant
    return PRCurve(points=tuple(
        (float(r), float(p)) for r, p in zip(recall, precision)), valid=True)


def average_precision(ranked_labels, query_label, total_relevant):
    """Mean precision over the ranks where relevant items appear.

    The denominator is min(total_relevant, depth): a query cannot be
    penalized for relevant items that do not fit in the window, but
    missing ones inside it do count. Returns (value, valid).
    """
    if total_relevant < 0:
        raise InputError(f"total_relevant must be >= 0, got {total_relevant}")
    if total_relevant == 0:
        return 0.0, False
    rel = _relevance(ranked_labels, query_label)
    if rel.size == 0:
        return 0.0, True
    hits = np.cumsum(rel)
    ks = np.arange(1, rel.size + 1, dtype=np.float64)
    at_relevant = (hits / ks)[rel > 0]
    denom = min(total_relevant, rel.size)
    return float(at_relevant.sum() / denom), True


def mean_average_precision(queries):
    """Mean per-query average precision over all valid queries.

    queries is a sequence of (ranked_labels, query_label, total_relevant)
    triples. Queries with total_relevant = 0 are skipped; if none remain,
    the mean is undefined and an InputError is raised.
    """
    values = []
    for ranked_labels, query_label, total_relevant in queries:
        ap, valid = average_precision(ranked_labels, query_label,
                                      total_relevant)
        if valid:
            values.append(ap)
    if not values:
        raise InputError("no query had any relevant item in the database")
    return float(np.mean(values))


def emit_pr_plot_data(curves, path):
    """Write labeled precision-recall points as CSV.

    curves is a sequence of (layer, filter_mode, PRCurve); one output row
    per point, ready for any plotting tool.
    """
    curves = list(curves)
    if not curves:
        raise InputError("no curves to write")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "filter_mode", "recall", "precision"])
        for layer, filter_mode, curve in curves:
            for recall, precision in curve.points:
                writer.writerow(
                    [layer, filter_mode, repr(recall), repr(precision)])
