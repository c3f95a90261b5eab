"""Flow abnormality scoring from pairwise latent distances, threshold
calibration (common or per street) and flow classification."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .compressor import SiameseAutoencoder, encode, pairwise_sim
from .core import Dataset, DatasetError, FleetFlow, Label, flow_windows
from .metrics import best_threshold


class ZeroNormWarning(UserWarning):
    pass


class Metric(str, Enum):
    MSE = "mse"  # tanh of mean squared latent difference
    COSINE = "cosine"


class ScoreMode(str, Enum):
    CANONICAL = "canonical"  # mean pairwise distance: 0 = perfectly similar fleet
    PAPER_EQ4 = "paper-eq4"  # 1 - sum_{i<j} d_ij / (m (m-1))


def cosine_sim(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 (with a warning) if either is zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent length mismatch {a.shape} vs {b.shape}")
    na, nb = np.sqrt(np.sum(a * a)), np.sqrt(np.sum(b * b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm latent in cosine similarity; using 0", ZeroNormWarning, stacklevel=2)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def pair_distances(latents, metric: Metric = Metric.MSE) -> np.ndarray:
    """(m, m) symmetric matrix of per-pair distances in [0, 1], zero diagonal."""
    lat = np.asarray(latents, dtype=np.float64)
    if lat.ndim != 2 or lat.shape[0] < 2:
        raise ValueError("need at least two latent vectors of equal length")
    if Metric(metric) is Metric.MSE:
        return pairwise_sim(lat)
    m = lat.shape[0]
    D = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            D[i, j] = D[j, i] = (1.0 - cosine_sim(lat[i], lat[j])) / 2.0
    return D


def score_from_pairs(D: np.ndarray, mode: ScoreMode = ScoreMode.CANONICAL) -> float:
    m = D.shape[0]
    iu = np.triu_indices(m, 1)
    total = math.fsum(D[iu])  # correctly rounded, so member order cannot change the score
    if ScoreMode(mode) is ScoreMode.CANONICAL:
        return total * 2.0 / (m * (m - 1))
    return 1.0 - total / (m * (m - 1))


def abnormality_score(latents, metric: Metric = Metric.MSE, mode: ScoreMode = ScoreMode.CANONICAL) -> float:
    return score_from_pairs(pair_distances(latents, metric), mode)


@dataclass
class ThresholdPolicy:
    common: Optional[float] = None
    per_street: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for t in [self.common, *self.per_street.values()]:
            if t is not None and not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold {t} outside [0, 1]")

    @property
    def kind(self) -> str:
        return "per-street" if self.per_street else "common"

    def theta_for(self, street_id: str) -> float:
        if street_id in self.per_street:
            return self.per_street[street_id]
        if self.common is None:
            raise KeyError(f"no threshold for street {street_id!r} and no common fallback")
        return self.common

    def to_dict(self):
        return {"kind": self.kind, "common": self.common, "per_street": dict(sorted(self.per_street.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("common"), dict(d.get("per_street") or {}))


def calibrate_threshold(scores: Sequence[float], labels, streets: Optional[Sequence[str]] = None, kind: str = "common") -> ThresholdPolicy:
    """Pick the F1-maximising threshold on labelled calibration scores.

    ``kind="per-street"`` additionally fits one threshold per street that
    has both labels; the common threshold is always a candidate there, so
    a street's own F1 never falls below the common one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray([Label(v) is Label.ABNORMAL if not isinstance(v, (bool, np.bool_)) else bool(v) for v in labels])
    if len(scores) != len(y):
        raise ValueError("scores and labels differ in length")
    has_both = y.any() and (~y).any()
    if kind == "common":
        if not has_both:
            raise ValueError("common calibration needs both Normal and Abnormal flows")
        return ThresholdPolicy(best_threshold(scores, y)[0])
    if kind != "per-street":
        raise ValueError(f"unknown threshold policy {kind!r}")
    if streets is None or len(streets) != len(scores):
        raise ValueError("per-street calibration needs one street id per score")
    common = best_threshold(scores, y)[0] if has_both else None
    streets = np.asarray(streets)
    per = {}
    for s in sorted(set(streets.tolist())):
        idx = streets == s
        if y[idx].any() and (~y[idx]).any():
            extra = [common] if common is not None else []
            per[s] = best_threshold(scores[idx], y[idx], extra=extra)[0]
    return ThresholdPolicy(common, per)


@dataclass
class DetectionResult:
    flow_id: str
    street_id: str
    score: float
    decision: Label
    pairwise: np.ndarray
    theta: Optional[float]
    millis: float
    method: str = "deepflow-mse"

    def to_record(self):
        return {
            "flow_id": self.flow_id,
            "street_id": self.street_id,
            "method": self.method,
            "score": self.score,
            "decision": self.decision.value,
            "theta": self.theta,
            "millis": round(self.millis, 4),
        }


def _model_windows(model: SiameseAutoencoder, flow: FleetFlow) -> np.ndarray:
    if model.normalization is None:
        raise DatasetError("model has no normalization; train it first")
    return flow_windows(flow, model.feature_spec, model.normalization)


def score_flow(model, flow: FleetFlow, metric=Metric.MSE, mode=ScoreMode.CANONICAL):
    """(score, pairwise matrix, millis) for one flow."""
    t0 = time.perf_counter()
    lat = encode(model, _model_windows(model, flow))
    D = pair_distances(lat, metric)
    s = score_from_pairs(D, mode)
    return s, D, (time.perf_counter() - t0) * 1000.0


def classify_flow(model, flow: FleetFlow, policy: Optional[ThresholdPolicy], metric=Metric.MSE, mode=ScoreMode.CANONICAL) -> DetectionResult:
    s, D, ms = score_flow(model, flow, metric, mode)
    theta = policy.theta_for(flow.street_id) if policy is not None else None
    decision = Label.ABNORMAL if theta is not None and s > theta else Label.NORMAL
    return DetectionResult(flow.flow_id, flow.street_id, s, decision, D, theta, ms, f"deepflow-{Metric(metric).value}")


def check_compatible(model: SiameseAutoencoder, ds: Dataset) -> None:
    if tuple(ds.feature_spec) != model.feature_spec:
        raise DatasetError(f"dataset features {ds.feature_spec} do not match model {model.feature_spec}")


def score_dataset(model, ds: Dataset, metric=Metric.MSE, mode=ScoreMode.CANONICAL, policy=None) -> List[DetectionResult]:
    check_compatible(model, ds)
    return [classify_flow(model, f, policy, metric, mode) for f in ds.flows]
