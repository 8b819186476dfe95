"""Classification metrics.  Confusion matrices are indexed ``[predicted, actual]``."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def confusion_matrix(predicted, actual, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(predicted, dtype=np.int64), np.asarray(actual, dtype=np.int64)), 1)
    return cm


def normalize_confusion(cm):
    """Divide each column (actual class) by its total; empty columns stay zero."""
    cm = np.asarray(cm, dtype=np.float64)
    totals = cm.sum(axis=0, keepdims=True)
    out = np.zeros_like(cm)
    np.divide(cm, totals, out=out, where=totals > 0)
    return out


def _ratio(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())

    @property
    def macro_f1(self):
        return float(self.f1.mean())

    @property
    def normalized_confusion(self):
        return normalize_confusion(self.confusion)

    def to_csv(self, class_names=None):
        names = class_names or [str(k) for k in range(len(self.precision))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        support = self.confusion.sum(axis=0)
        for k, name in enumerate(names):
            w.writerow([name, repr(float(self.precision[k])), repr(float(self.recall[k])),
                        repr(float(self.f1[k])), int(support[k])])
        w.writerow(["macro", repr(self.macro_precision), repr(self.macro_recall), repr(self.macro_f1),
                    int(support.sum())])
        w.writerow(["accuracy", repr(self.accuracy), "", "", int(support.sum())])
        return buf.getvalue()

    def confusion_csv(self, normalized=True):
        grid = self.normalized_confusion if normalized else self.confusion
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = grid.shape[0]
        w.writerow(["predicted\\actual"] + [str(j) for j in range(k)])
        for i in range(k):
            w.writerow([str(i)] + [repr(float(v)) if normalized else int(v) for v in grid[i]])
        return buf.getvalue()

    def to_text(self, class_names=None):
        names = class_names or [str(k) for k in range(len(self.precision))]
        lines = [f"accuracy {self.accuracy:.4f}",
                 f"{'class':<12}{'precision':>10}{'recall':>10}{'f1':>10}"]
        for k, name in enumerate(names):
            lines.append(f"{name:<12}{self.precision[k]:>10.4f}{self.recall[k]:>10.4f}{self.f1[k]:>10.4f}")
        lines.append(f"{'macro':<12}{self.macro_precision:>10.4f}{self.macro_recall:>10.4f}"
                     f"{self.macro_f1:>10.4f}")
        return "\n".join(lines)


def report_from_confusion(cm):
    """Accuracy and per-class precision/recall/F1 from a ``[predicted, actual]`` count matrix.

    A class that is never predicted gets precision 0; one with no samples gets
    recall 0.  F1 is 0 whenever precision or recall is 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=1).astype(np.float64)
    actual = cm.sum(axis=0).astype(np.float64)
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, actual)
    f1 = _ratio(2 * precision * recall, precision + recall)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return MetricsReport(cm, accuracy, precision, recall, f1)


def classification_report(predicted, actual, n_classes):
    return report_from_confusion(confusion_matrix(predicted, actual, n_classes))
