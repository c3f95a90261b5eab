"""Run every configured method on calibration and test flows, calibrate
thresholds, and assemble the report plus its plot-ready data files.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines as bl
from .compressor import SiameseAutoencoder
from .core import Dataset, FleetFlow, Label, Normalization, flow_windows
from .detector import Metric, ScoreMode, ThresholdPolicy, calibrate_threshold, score_flow
from .metrics import ConfusionCounts, CurvePoint, confusion_at, pr_curve, precision_recall_f1, roc_curve

log = logging.getLogger(__name__)

# keys whose values are wall-clock measurements; everything else in a report is deterministic
TIMING_KEYS = frozenset({"mean_millis", "timing"})

ScoreTriple = Tuple[np.ndarray, np.ndarray, np.ndarray]
Scorer = Callable[[Dataset, Dataset], ScoreTriple]  # (calib, test) -> (calib scores, test scores, test millis)


# --- scorers ---------------------------------------------------------------------


def _timed_map(fn: Callable[[FleetFlow], float], flows: Sequence[FleetFlow]) -> Tuple[np.ndarray, np.ndarray]:
    scores, millis = [], []
    for f in flows:
        t0 = time.perf_counter()
        scores.append(fn(f))
        millis.append((time.perf_counter() - t0) * 1000.0)
    return np.asarray(scores, dtype=np.float64), np.asarray(millis)


def detector_scorer(model: SiameseAutoencoder, metric=Metric.MSE, mode=ScoreMode.CANONICAL) -> Scorer:
    def one(f):
        return score_flow(model, f, metric, mode)[0]

    def run(calib, test):
        c, _ = _timed_map(one, calib.flows)
        t, ms = _timed_map(one, test.flows)
        return c, t, ms

    return run


def windowed_scorer(fn: Callable[[np.ndarray], float], feature_spec, norm: Normalization) -> Scorer:
    """Adapter for per-flow baselines operating on normalized member windows."""

    def one(f):
        return fn(flow_windows(f, feature_spec, norm))

    def run(calib, test):
        c, _ = _timed_map(one, calib.flows)
        t, ms = _timed_map(one, test.flows)
        return c, t, ms

    return run


def dtw_scorer(feature_spec, norm, cfg: bl.DtwConfig = bl.DtwConfig()) -> Scorer:
    return windowed_scorer(lambda w: bl.fleet_score_dtw(w, cfg), feature_spec, norm)


def gak_scorer(feature_spec, norm, sigma="median", seed: int = 0) -> Scorer:
    def run(calib, test):
        s = sigma
        if s == "median":
            s = bl.median_sigma(np.stack([flow_windows(f, feature_spec, norm) for f in calib.flows]), seed=seed)
        cfg = bl.GakConfig(float(s))
        return windowed_scorer(lambda w: bl.fleet_score_gak(w, cfg), feature_spec, norm)(calib, test)

    return run


def iforest_scorer(cfg: bl.IForestConfig = bl.IForestConfig()) -> Scorer:
    """One forest over every vehicle of calibration and test, so thresholds transfer."""

    def run(calib, test):
        t0 = time.perf_counter()
        s = bl.fleet_score_iforest(list(calib.flows) + list(test.flows), cfg)
        per_flow = (time.perf_counter() - t0) * 1000.0 / len(s)
        n = len(calib)
        return s[:n], s[n:], np.full(len(test), per_flow)

    return run


# --- report --------------------------------------------------------------------------


def _labels(ds: Dataset) -> np.ndarray:
    return np.array([Label(f.label) is Label.ABNORMAL for f in ds.flows])


def _streets(ds: Dataset) -> List[str]:
    return [f.street_id for f in ds.flows]


def f1_at(scores, labels, thetas) -> float:
    """F1 with a per-flow threshold array (strict > rule)."""
    scores, y, thetas = np.asarray(scores), np.asarray(labels, dtype=bool), np.asarray(thetas)
    pred = scores > thetas
    c = ConfusionCounts(int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))
    return precision_recall_f1(c)[2]


def _finite_or_none(v: float) -> Optional[float]:
    """JSON has no infinity; the catch-all ROC threshold below every score becomes null."""
    return v if np.isfinite(v) else None


@dataclass
class StreetRow:
    street_id: str
    theta_individual: Optional[float]
    theta_common: Optional[float]
    f1_individual: float
    f1_common: float


@dataclass
class MethodReport:
    method: str
    policy: Optional[ThresholdPolicy] = None
    counts: Optional[ConfusionCounts] = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    auc: Optional[float] = None
    roc: List[CurvePoint] = field(default_factory=list)
    pr: List[CurvePoint] = field(default_factory=list)
    mean_millis: float = 0.0
    per_street_test: Dict[str, Dict] = field(default_factory=dict)
    street_study: List[StreetRow] = field(default_factory=list)
    test_scores: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self):
        if not self.ok:
            return {"method": self.method, "error": self.error}
        return {
            "method": self.method,
            "policy": self.policy.to_dict(),
            "counts": self.counts.to_dict(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "roc": [[_finite_or_none(p.threshold), p.x, p.y] for p in self.roc],
            "pr": [[_finite_or_none(p.threshold), p.x, p.y] for p in self.pr],
            "mean_millis": self.mean_millis,
            "per_street_test": self.per_street_test,
            "street_study": [r.__dict__ for r in self.street_study],
        }


@dataclass
class EvalReport:
    methods: Dict[str, MethodReport]
    threshold_kind: str
    n_calibration: int
    n_test: int
    meta: Dict = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            "threshold_kind": self.threshold_kind,
            "n_calibration": self.n_calibration,
            "n_test": self.n_test,
            "meta": self.meta,
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "timing": self.timing,
        }


def strip_timing(obj):
    """Copy of a report dict without wall-clock fields (for determinism checks)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _street_study(scores, y, streets, policy: ThresholdPolicy) -> List[StreetRow]:
    rows = []
    streets = np.asarray(streets)
    for s in sorted(set(streets.tolist())):
        idx = streets == s
        ti = policy.per_street.get(s, policy.common)
        tc = policy.common
        fi = f1_at(scores[idx], y[idx], ti) if ti is not None else 0.0
        fc = f1_at(scores[idx], y[idx], tc) if tc is not None else 0.0
        rows.append(StreetRow(s, ti, tc, fi, fc))
    return rows


def evaluate_method(
    name: str, scorer: Scorer, calib: Dataset, test: Dataset, threshold_kind: str = "common", street_study: bool = False
) -> MethodReport:
    """Score, calibrate on ``calib``, and measure on ``test``.

    ``street_study`` adds the individual-vs-common threshold table on the
    calibration split even when the headline numbers use a common threshold.
    """
    cal_s, test_s, millis = scorer(calib, test)
    cal_y, test_y = _labels(calib), _labels(test)
    policy = calibrate_threshold(cal_s, cal_y, _streets(calib), kind=threshold_kind)
    thetas = np.array([policy.theta_for(s) for s in _streets(test)])
    pred = test_s > thetas
    counts = ConfusionCounts(
        int(np.sum(pred & test_y)), int(np.sum(pred & ~test_y)), int(np.sum(~pred & ~test_y)), int(np.sum(~pred & test_y))
    )
    p, r, f1 = precision_recall_f1(counts)
    rep = MethodReport(name, policy, counts, p, r, f1, mean_millis=float(np.mean(millis)), test_scores=test_s)
    if test_y.any() and (~test_y).any():
        rep.roc, rep.auc = roc_curve(test_s, test_y)
    if test_y.any():
        rep.pr = pr_curve(test_s, test_y)
    streets = np.asarray(_streets(test))
    for s in sorted(set(streets.tolist())):
        idx = streets == s
        c = confusion_at(test_s[idx], test_y[idx], policy.theta_for(s))
        rep.per_street_test[s] = {"counts": c.to_dict(), "f1": precision_recall_f1(c)[2]}
    if threshold_kind == "per-street" or street_study:
        ps = policy if threshold_kind == "per-street" else calibrate_threshold(cal_s, cal_y, _streets(calib), kind="per-street")
        rep.street_study = _street_study(cal_s, cal_y, _streets(calib), ps)
    return rep


def evaluate_methods(
    calib: Dataset,
    test: Dataset,
    scorers: Dict[str, Scorer],
    threshold_kind: str = "common",
    meta: Optional[Dict] = None,
    street_study: bool = False,
) -> EvalReport:
    """Evaluate each scorer; a failing method is recorded and the rest still run."""
    t0 = time.perf_counter()
    out = {}
    timing = {}
    for name, scorer in scorers.items():
        t1 = time.perf_counter()
        try:
            out[name] = evaluate_method(name, scorer, calib, test, threshold_kind, street_study)
        except Exception as e:  # recorded per method by design
            log.warning("method %s failed", name, exc_info=True)
            out[name] = MethodReport(name, error=f"{type(e).__name__}: {e}")
        timing[f"{name}_seconds"] = time.perf_counter() - t1
    timing["total_seconds"] = time.perf_counter() - t0
    return EvalReport(out, threshold_kind, len(calib), len(test), dict(meta or {}), timing)


# --- files ----------------------------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_report(report: EvalReport, out_dir, test: Optional[Dataset] = None) -> List[Path]:
    """roc_<method>.csv, pr_<method>.csv, confusion.csv, report.json and, with
    ``test``, scores.jsonl with one record per (method, test flow)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in report.methods.items():
        if not m.ok:
            continue
        if m.roc:
            p = out / f"roc_{name}.csv"
            _write_csv(p, ("threshold", "fpr", "tpr"), ((c.threshold, c.x, c.y) for c in m.roc))
            written.append(p)
        if m.pr:
            p = out / f"pr_{name}.csv"
            _write_csv(p, ("threshold", "recall", "precision"), ((c.threshold, c.x, c.y) for c in m.pr))
            written.append(p)
    p = out / "confusion.csv"
    _write_csv(
        p,
        ("method", "tp", "fp", "tn", "fn"),
        ((n, m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn) for n, m in report.methods.items() if m.ok),
    )
    written.append(p)
    p = out / "report.json"
    p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    written.append(p)
    if test is not None:
        p = out / "scores.jsonl"
        with open(p, "w") as fh:
            for name, m in report.methods.items():
                if not m.ok:
                    continue
                for f, s in zip(test.flows, m.test_scores):
                    theta = m.policy.theta_for(f.street_id)
                    rec = {
                        "flow_id": f.flow_id,
                        "street_id": f.street_id,
                        "method": name,
                        "score": float(s),
                        "decision": (Label.ABNORMAL if s > theta else Label.NORMAL).value,
                        "theta": theta,
                        "label": Label(f.label).value,
                    }
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(p)
    return written
