"""Multiclass classification metrics, ranking AUC, and loss-curve averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    per_class: List[ClassMetrics]
    confusion: np.ndarray    # rows true, cols predicted

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "per_class": [{"precision": c.precision, "recall": c.recall,
                           "f1": c.f1, "support": c.support} for c in self.per_class],
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        return cls(accuracy=d["accuracy"], weighted_f1=d["weighted_f1"],
                   macro_f1=d["macro_f1"],
                   per_class=[ClassMetrics(**c) for c in d["per_class"]],
                   confusion=np.asarray(d["confusion"], dtype=np.int64))

    def metric(self, name: str) -> float:
        return {"accuracy": self.accuracy, "weighted_f1": self.weighted_f1,
                "macro_f1": self.macro_f1}[name]


METRIC_NAMES = ("accuracy", "weighted_f1", "macro_f1")


def compute_metrics(y_true, y_pred, n_classes: int) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1, macro and support-weighted F1.

    Macro F1 averages only over classes with nonzero support in `y_true`;
    a class the test split never contains says nothing about the model.
    Per-class F1 is 0 where precision + recall is 0.
    """
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if len(t) == 0:
        raise ValueError("compute_metrics: empty input")
    if len(t) != len(p):
        raise ValueError(f"compute_metrics: {len(t)} true vs {len(p)} predicted labels")
    if t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes:
        raise ValueError(f"compute_metrics: label outside [0, {n_classes})")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)

    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n_classes), where=pr > 0)

    present = support > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    weighted = float((f1 * support).sum() / support.sum())
    accuracy = float(tp.sum() / len(t))
    per_class = [ClassMetrics(float(precision[k]), float(recall[k]), float(f1[k]),
                              int(support[k])) for k in range(n_classes)]
    return MetricsReport(accuracy=accuracy, weighted_f1=weighted, macro_f1=macro,
                         per_class=per_class, confusion=confusion)


def percent_loss(m: float, m_ref: float) -> float:
    """Performance loss relative to a reference, in percent. Negative means
    the model beat the reference."""
    if m_ref <= 0:
        raise ValueError(f"percent_loss: reference metric must be positive, got {m_ref}")
    return 100.0 * (m_ref - m) / m_ref


def roc_auc(labels, scores) -> float:
    """Rank-statistic AUC with the midrank convention for ties, at 64-bit."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(y) != len(s):
        raise ValueError(f"roc_auc: {len(y)} labels vs {len(s)} scores")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: need at least one positive and one negative")
    ranks = rankdata(s)   # average (midrank) method
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# loss-curve post-processing


def normalize_curve(values: Sequence[float]) -> List[float]:
    """Min-max normalize a curve onto [0, 1]; a constant curve maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [0.0] * len(v)
    return ((v - lo) / (hi - lo)).tolist()


def average_curves(curves: Sequence[Sequence[float]]) -> List[float]:
    """Normalize each curve, then average per epoch over the runs that
    reached that epoch (shorter runs are simply absent from later epochs)."""
    if not curves:
        return []
    normalized = [normalize_curve(c) for c in curves if len(c)]
    length = max(len(c) for c in normalized)
    out = []
    for e in range(length):
        vals = [c[e] for c in normalized if e < len(c)]
        out.append(float(np.mean(vals)))
    return out


def group_and_average(logs: Dict[tuple, List[Sequence[float]]]) -> Dict[tuple, List[float]]:
    """Average normalized curves per (task, strategy)-style grouping key."""
    return {key: average_curves(curves) for key, curves in sorted(logs.items())}
