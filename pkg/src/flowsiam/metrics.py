"""Confusion counts, precision/recall/F1 and ROC / precision-recall curves.

Positive class is Abnormal; a flow is predicted positive iff score > theta.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .core import Label

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    x: float
    y: float


def _as_bool_labels(labels) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, (bool, np.bool_)):
            out.append(bool(v))
        elif isinstance(v, (int, np.integer)):
            out.append(v == 1)
        else:
            out.append(Label(v) is Label.ABNORMAL)
    return np.asarray(out, dtype=bool)


def confusion_at(scores: Sequence[float], labels, theta: float) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    if len(scores) != len(y):
        raise ValueError(f"{len(scores)} scores but {len(y)} labels")
    pred = scores > theta
    return ConfusionCounts(
        int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y))
    )


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def f1_from(p: float, r: float) -> float:
    return _ratio(2.0 * p * r, p + r)


def precision_recall_f1(c: ConfusionCounts) -> Tuple[float, float, float]:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    return p, r, f1_from(p, r)


def _sweep(scores, labels):
    """Counts at every distinct score used as a threshold, plus one below the minimum.

    Returns thresholds in decreasing order with cumulative tp / fp counts of
    flows scoring strictly above each threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    if len(scores) != len(y):
        raise ValueError(f"{len(scores)} scores but {len(y)} labels")
    distinct = np.unique(scores)[::-1]
    thresholds = np.concatenate([distinct, [-np.inf]])
    order = np.argsort(-scores, kind="stable")
    s_sorted, y_sorted = scores[order], y[order]
    # number of flows with score > thr: count of sorted scores strictly greater
    above = np.searchsorted(-s_sorted, -thresholds, side="left")
    ctp = np.concatenate([[0], np.cumsum(y_sorted)])
    cfp = np.concatenate([[0], np.cumsum(~y_sorted)])
    return thresholds, ctp[above], cfp[above], int(y.sum()), int((~y).sum())


def roc_curve(scores, labels) -> Tuple[List[CurvePoint], float]:
    """ROC points (x = FPR, y = TPR), one per distinct score, and trapezoidal AUC."""
    thresholds, tp, fp, P, N = _sweep(scores, labels)
    if P == 0 or N == 0:
        raise ValueError("ROC needs both Normal and Abnormal labels")
    tpr, fpr = tp / P, fp / N
    pts = [CurvePoint(float(t), float(x), float(yv)) for t, x, yv in zip(thresholds, fpr, tpr)]
    return pts, float(_trapezoid(tpr, fpr))


def pr_curve(scores, labels) -> List[CurvePoint]:
    """Precision-recall points (x = recall, y = precision) sorted by recall."""
    thresholds, tp, fp, P, _ = _sweep(scores, labels)
    if P == 0:
        raise ValueError("precision-recall curve needs at least one Abnormal label")
    pts = []
    for t, a, b in zip(thresholds, tp, fp):
        if a + b == 0:
            continue
        pts.append(CurvePoint(float(t), float(a / P), float(a / (a + b))))
    pts.sort(key=lambda p: (p.x, -p.threshold))
    return pts


def roc_auc(scores, labels) -> float:
    return roc_curve(scores, labels)[1]


def threshold_candidates(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus the minimum and maximum."""
    s = np.unique(np.asarray(scores, dtype=np.float64))
    if len(s) == 0:
        raise ValueError("no scores to threshold")
    return np.unique(np.concatenate([[s[0], s[-1]], (s[:-1] + s[1:]) / 2.0]))


def best_threshold(scores, labels, extra=()) -> Tuple[float, float]:
    """theta maximising F1 over the candidate sweep; ties go to the larger theta."""
    cands = np.unique(np.concatenate([threshold_candidates(scores), np.asarray(extra, dtype=np.float64)]))
    best_t, best_f = None, -1.0
    for t in cands:
        f = precision_recall_f1(confusion_at(scores, labels, t))[2]
        if f >= best_f:
            best_t, best_f = float(t), f
    return best_t, best_f
