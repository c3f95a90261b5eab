"""Domain types shared by every stage: trajectories, fleets, datasets.

Also holds the plumbing that turns raw trajectories into fixed-size,
normalized model inputs (resampling, min-max normalization, windowing)
and the JSON dataset file format.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

COLUMNS = ("time", "x", "y", "speed")
DEFAULT_FEATURES = ("x", "y", "speed")
CLIP = 1.5
DATASET_FORMAT_VERSION = 1


class Label(str, Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"


class AnomalyKind(str, Enum):
    OVER_SPEED = "OverSpeed"
    UNDER_SPEED = "UnderSpeed"


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Trajectory:
    """One vehicle's fixed-rate series; ``samples`` is (T, 4): time, x, y, speed."""

    vehicle_id: str
    samples: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != len(COLUMNS):
            raise DatasetError(f"{self.vehicle_id}: samples must be (T, {len(COLUMNS)})")
        if len(self.samples) == 0:
            raise DatasetError(f"{self.vehicle_id}: empty trajectory")
        if not self.rate_hz > 0:
            raise DatasetError(f"{self.vehicle_id}: rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError(f"{self.vehicle_id}: non-finite sample")
        if np.any(self.samples[:, 3] < 0):
            raise DatasetError(f"{self.vehicle_id}: negative speed")
        if len(self.samples) > 1:
            steps = np.diff(self.samples[:, 0])
            if np.any(np.abs(steps - 1.0 / self.rate_hz) > 1e-6):
                raise DatasetError(f"{self.vehicle_id}: timestamps not on a 1/rate_hz grid")

    def __len__(self):
        return len(self.samples)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.samples[:, COLUMNS.index(name)]
        except ValueError:
            raise DatasetError(f"unknown feature {name!r}; known: {COLUMNS}") from None

    @property
    def time(self):
        return self.samples[:, 0]

    @property
    def speed(self):
        return self.samples[:, 3]


@dataclass(eq=False)
class FleetFlow:
    flow_id: str
    members: List[Trajectory]
    label: Label = Label.NORMAL
    street_id: str = ""
    anomaly_kind: Optional[AnomalyKind] = None
    flags: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.label = Label(self.label)
        if self.anomaly_kind is not None:
            self.anomaly_kind = AnomalyKind(self.anomaly_kind)
        if len(self.members) < 2:
            raise DatasetError(f"flow {self.flow_id}: need at least 2 members, got {len(self.members)}")
        lengths = {len(t) for t in self.members}
        if len(lengths) != 1:
            raise DatasetError(f"flow {self.flow_id}: members differ in length {sorted(lengths)}")
        t0 = self.members[0].time
        for t in self.members[1:]:
            if np.max(np.abs(t.time - t0)) > 1e-6:
                raise DatasetError(f"flow {self.flow_id}: members span different time windows")

    @property
    def m(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Normalization:
    """Per-feature affine map ``(v - shift) / scale``."""

    shift: Tuple[float, ...]
    scale: Tuple[float, ...]

    def __post_init__(self):
        if len(self.shift) != len(self.scale):
            raise DatasetError("normalization shift/scale length mismatch")
        if any(not s > 0 for s in self.scale):
            raise DatasetError("normalization scale must be > 0")

    def to_dict(self):
        return {"shift": list(self.shift), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["shift"]), tuple(float(v) for v in d["scale"]))


@dataclass(eq=False)
class Dataset:
    flows: List[FleetFlow]
    feature_spec: Tuple[str, ...] = DEFAULT_FEATURES
    normalization: Optional[Normalization] = None
    rate_hz: float = 1.0
    T: Optional[int] = None

    def __post_init__(self):
        self.feature_spec = tuple(self.feature_spec)
        for name in self.feature_spec:
            if name not in COLUMNS:
                raise DatasetError(f"unknown feature {name!r}")
        if self.normalization is not None and len(self.normalization.scale) != len(self.feature_spec):
            raise DatasetError("normalization arity does not match feature_spec")

    def __len__(self):
        return len(self.flows)

    def n_trajectories(self) -> int:
        return sum(f.m for f in self.flows)

    def subset(self, flows: Sequence[FleetFlow]) -> "Dataset":
        return replace(self, flows=list(flows))

    def streets(self) -> List[str]:
        return sorted({f.street_id for f in self.flows})


# --- resampling / normalization -------------------------------------------------


def resample_to_length(t: Trajectory, T: int) -> Trajectory:
    """Linearly resample ``t`` onto ``T`` evenly spaced instants over its time span.

    A single-sample trajectory is extended by holding its value at the
    original rate.
    """
    if T < 1:
        raise ValueError("T must be a positive integer")
    if len(t) == T:
        return t
    src = t.samples
    if len(t) == 1:
        out = np.repeat(src, T, axis=0)
        out[:, 0] = src[0, 0] + np.arange(T) / t.rate_hz
        return Trajectory(t.vehicle_id, out, t.rate_hz)
    t0, t1 = src[0, 0], src[-1, 0]
    if T == 1:
        return Trajectory(t.vehicle_id, src[:1].copy(), t.rate_hz)
    times = t0 + (t1 - t0) * np.arange(T) / (T - 1)
    times[-1] = t1
    out = np.empty((T, src.shape[1]))
    out[:, 0] = times
    for k in range(1, src.shape[1]):
        out[:, k] = np.interp(times, src[:, 0], src[:, k])
    rate = (T - 1) / (t1 - t0)
    # regrid exactly so the constant-step invariant survives float roundoff
    out[:, 0] = t0 + np.arange(T) / rate
    return Trajectory(t.vehicle_id, out, rate)


def fit_normalizer(train: Dataset) -> Normalization:
    """Min-max map of each feature onto [-1, 1]; constant features get scale 1."""
    if not train.flows:
        raise DatasetError("cannot fit a normalizer on an empty dataset")
    stacked = np.concatenate(
        [np.column_stack([m.column(name) for name in train.feature_spec]) for f in train.flows for m in f.members]
    )
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    shift, scale = [], []
    for a, b in zip(lo, hi):
        half = (b - a) / 2.0
        if half > 0:
            shift.append(float((a + b) / 2.0))
            scale.append(float(half))
        else:
            shift.append(float(a))
            scale.append(1.0)
    return Normalization(tuple(shift), tuple(scale))


def to_window(t: Trajectory, feature_spec: Sequence[str], norm: Normalization) -> np.ndarray:
    """(T, d) matrix of normalized features, clipped to [-1.5, 1.5]."""
    cols = np.column_stack([t.column(name) for name in feature_spec])
    if cols.shape[1] != len(norm.scale):
        raise DatasetError("feature_spec arity does not match normalization")
    w = (cols - np.asarray(norm.shift)) / np.asarray(norm.scale)
    return np.clip(w, -CLIP, CLIP)


def flow_windows(flow: FleetFlow, feature_spec, norm: Normalization) -> np.ndarray:
    """(m, T, d) stack of member windows."""
    return np.stack([to_window(t, feature_spec, norm) for t in flow.members])


def dataset_windows(ds: Dataset, norm: Optional[Normalization] = None) -> np.ndarray:
    """(n_flows, m, T, d) tensor; all flows must share m and T."""
    norm = norm or ds.normalization
    if norm is None:
        raise DatasetError("dataset has no normalization; fit one first")
    return np.stack([flow_windows(f, ds.feature_spec, norm) for f in ds.flows])


def _split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    raw = [n * f for f in fractions]
    sizes = [math.floor(r) for r in raw]
    rest = n - sum(sizes)
    # largest remainder first; ties go to the later split
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - sizes[i], i), reverse=True)
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(d: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle deterministically and cut into (train, calibration, test).

    Abnormal flows that land in the training part are moved to calibration
    so the model never trains on an anomaly.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(d.flows))
    flows = [d.flows[i] for i in order]
    n_train, n_cal, _ = _split_sizes(len(flows), fractions)
    train = flows[:n_train]
    cal = flows[n_train : n_train + n_cal]
    test = flows[n_train + n_cal :]
    moved = [f for f in train if f.label is Label.ABNORMAL]
    if moved:
        log.warning("moved %d abnormal flow(s) from train to calibration", len(moved))
        train = [f for f in train if f.label is Label.NORMAL]
        cal = cal + moved
    return d.subset(train), d.subset(cal), d.subset(test)


# --- file format -----------------------------------------------------------------


def _flow_to_json(f: FleetFlow):
    return {
        "flow_id": f.flow_id,
        "label": Label(f.label).value,
        "street_id": f.street_id,
        "anomaly_kind": AnomalyKind(f.anomaly_kind).value if f.anomaly_kind else None,
        "flags": f.flags,
        "vehicle_ids": [m.vehicle_id for m in f.members],
        "rates_hz": [m.rate_hz for m in f.members],
        "members": [m.samples.tolist() for m in f.members],
    }


def dataset_to_json(ds: Dataset) -> str:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "columns": list(COLUMNS),
        "feature_spec": list(ds.feature_spec),
        "rate_hz": ds.rate_hz,
        "T": ds.T,
        "normalization": ds.normalization.to_dict() if ds.normalization else None,
        "flows": [_flow_to_json(f) for f in ds.flows],
    }
    # repr-based float text round-trips float64 exactly
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def dataset_from_json(text: str) -> Dataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt dataset file: {e}") from e
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format_version {doc.get('format_version')!r}")
    norm = Normalization.from_dict(doc["normalization"]) if doc.get("normalization") else None
    flows = []
    for fd in doc["flows"]:
        members = [
            Trajectory(vid, np.asarray(s, dtype=np.float64), rate)
            for vid, rate, s in zip(fd["vehicle_ids"], fd["rates_hz"], fd["members"])
        ]
        flows.append(
            FleetFlow(
                fd["flow_id"], members, Label(fd["label"]), fd["street_id"],
                AnomalyKind(fd["anomaly_kind"]) if fd.get("anomaly_kind") else None,
                dict(fd.get("flags") or {}),
            )
        )
    return Dataset(flows, tuple(doc["feature_spec"]), norm, float(doc["rate_hz"]), doc.get("T"))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_json(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_json(Path(path).read_text())
