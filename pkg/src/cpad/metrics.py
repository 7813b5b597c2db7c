"""Binary classification metrics with anomalous = positive class.

AUC is the trapezoidal area under an ROC curve whose thresholds are the
distinct scores; tied scores move in one step, which makes the area equal to
the pairwise concordance probability (ties count one half).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"confusion count {name} is negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    auc: float | None
    precision: float
    recall: float
    mcc: float
    accuracy: float
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        return cls(**d)


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values).reshape(-1)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be 0/1 (or booleans)")
    return arr.astype(bool)


def confusion(labels, predictions) -> ConfusionMatrix:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if y.shape != p.shape:
        raise ValueError(f"labels ({y.size}) and predictions ({p.size}) differ in length")
    return ConfusionMatrix(
        tp=int(np.sum(y & p)),
        fp=int(np.sum(~y & p)),
        fn=int(np.sum(y & ~p)),
        tn=int(np.sum(~y & ~p)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def scalar_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Precision, recall, F1, accuracy and MCC; any zero denominator yields 0."""
    if cm.total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    accuracy = (tp + tn) / cm.total
    marginals = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(marginals) if marginals else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy, "mcc": mcc}


def roc_curve(labels, scores) -> list[tuple[float, float, float]]:
    """ROC points ``(threshold, fpr, tpr)`` from ``(inf, 0, 0)`` to ``(min score, 1, 1)``.

    A sample is called positive at threshold ``t`` when its score is ``>= t``.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=float).reshape(-1)
    if y.shape != s.shape:
        raise ValueError(f"labels ({y.size}) and scores ({s.size}) differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC undefined: both classes must be present")

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tps = np.cumsum(y_sorted)[ends]
    fps = (ends + 1) - tps
    points = [(math.inf, 0.0, 0.0)]
    points += [(float(s_sorted[e]), fp / n_neg, tp / n_pos) for e, tp, fp in zip(ends, tps, fps)]
    return points


def roc_auc(labels, scores) -> tuple[float, list[tuple[float, float, float]]]:
    points = roc_curve(labels, scores)
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, points


def report(labels, scores, threshold: float = 0.5) -> MetricsReport:
    """Full report with predictions ``score > threshold``; AUC is None for single-class input."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=float).reshape(-1)
    cm = confusion(y, s > threshold)
    m = scalar_metrics(cm)
    auc = roc_auc(y, s)[0] if 0 < y.sum() < y.size else None
    return MetricsReport(auc=auc, confusion=cm, **m)


def write_roc_csv(points, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in points:
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])
