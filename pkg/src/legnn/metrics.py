"""Classification metrics and representation-smoothness measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def _labels_pair(pred, true):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ContractError(f"prediction/label lengths differ: {len(pred)} vs {len(true)}")
    if len(pred) == 0:
        raise ContractError("metrics need at least one prediction")
    return pred, true


def accuracy(pred, true) -> float:
    pred, true = _labels_pair(pred, true)
    return float(np.mean(pred == true))


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts items of true class ``t`` predicted as ``p``."""
    pred, true = _labels_pair(pred, true)
    if pred.min() < 0 or true.min() < 0 or max(pred.max(), true.max()) >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_class_prf(pred, true, num_classes: int):
    """Per-class precision, recall and F1; 0 wherever a denominator vanishes."""
    cm = confusion_matrix(pred, true, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(pred, true, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``num_classes`` classes."""
    return float(np.mean(per_class_prf(pred, true, num_classes)[2]))


def label_difference(Z, members) -> float:
    """Mean Euclidean distance of the member rows of ``Z`` to their centroid."""
    members = np.asarray(members, dtype=np.int64)
    if len(members) == 0:
        raise ContractError("label difference needs a nonempty class")
    rows = np.asarray(Z, dtype=np.float64)[members]
    center = rows.mean(axis=0)
    return float(np.mean(np.linalg.norm(rows - center, axis=1)))


def class_label_differences(Z, labels, num_classes: int | None = None) -> dict[int, float]:
    """LD for every class with at least one member; ``labels < 0`` are skipped."""
    labels = np.asarray(labels, dtype=np.int64)
    C = num_classes if num_classes is not None else int(labels.max()) + 1
    out = {}
    for c in range(C):
        members = np.flatnonzero(labels == c)
        if len(members):
            out[c] = label_difference(Z, members)
    return out


def graph_difference(Z, labels, num_classes: int | None = None) -> float:
    """Mean LD over classes that have members (empty classes are skipped)."""
    lds = class_label_differences(Z, labels, num_classes)
    if not lds:
        raise ContractError("graph difference needs at least one labeled node")
    return float(np.mean(list(lds.values())))


@dataclass
class PseudoLabelReport:
    accuracy: float
    bucket_edges: np.ndarray
    bucket_counts: np.ndarray
    bucket_accuracy: np.ndarray  # NaN for empty buckets


def pseudo_label_accuracy(nodes, pseudo_labels, confidences, true_labels, num_buckets: int = 10):
    """Accuracy of pseudo labels overall and per confidence bucket.

    Buckets split [0, 1] into ``num_buckets`` equal right-closed intervals
    (the first also includes 0). Returns None when there are no pseudo labels.
    Nodes whose true label is unknown (-1) are ignored.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    true = np.asarray(true_labels, dtype=np.int64)[nodes] if len(nodes) else np.zeros(0, np.int64)
    known = true >= 0
    if not np.any(known):
        return None
    pseudo_labels, confidences, true = pseudo_labels[known], confidences[known], true[known]
    correct = pseudo_labels == true
    edges = np.linspace(0.0, 1.0, num_buckets + 1)
    idx = np.clip(np.ceil(confidences * num_buckets).astype(np.int64) - 1, 0, num_buckets - 1)
    counts = np.bincount(idx, minlength=num_buckets)
    hits = np.bincount(idx, weights=correct.astype(np.float64), minlength=num_buckets)
    with np.errstate(invalid="ignore", divide="ignore"):
        bucket_acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return PseudoLabelReport(float(correct.mean()), edges, counts, bucket_acc)


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    graph_difference: float | None = None
    label_differences: dict[int, float] = field(default_factory=dict)
    pseudo_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "graph_difference": self.graph_difference,
            "label_differences": {str(k): v for k, v in self.label_differences.items()},
            "pseudo_accuracy": self.pseudo_accuracy,
        }


def evaluate(pred, true, num_classes: int, Z=None) -> EvalReport:
    p, r, f = per_class_prf(pred, true, num_classes)
    report = EvalReport(
        accuracy(pred, true), float(np.mean(f)), p.tolist(), r.tolist(), f.tolist()
    )
    if Z is not None:
        # Z rows are aligned with ``true``
        report.label_differences = class_label_differences(Z, true, num_classes)
        report.graph_difference = float(np.mean(list(report.label_differences.values())))
    return report
