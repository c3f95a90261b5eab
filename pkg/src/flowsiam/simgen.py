"""Seeded generator of labeled fleet-trajectory corpora.

Each fleet drives a street profile under one of three speed-limit
scenarios (constant, raise, decline).  Every vehicle tracks a target speed
drawn from a Gaussian speed class scaled by the current limit, with
bounded acceleration and a hard minimum gap to its in-lane leader.
Abnormal fleets carry exactly one member drawn from an over- or
under-speed class.

Floating-car-data (FCD) import/export lets external simulator traces
stand in for the built-in generator.
"""
from __future__ import annotations

import csv
import logging
import math
import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    AnomalyKind,
    Dataset,
    DatasetError,
    DEFAULT_FEATURES,
    FleetFlow,
    Label,
    Trajectory,
    resample_to_length,
)

log = logging.getLogger(__name__)

KMH = 1.0 / 3.6


@dataclass(frozen=True)
class SpeedClass:
    name: str
    mean_mult: float
    std_mult: float
    min_mult: float
    max_mult: float

    def __post_init__(self):
        if not self.min_mult <= self.mean_mult <= self.max_mult:
            raise ValueError(f"{self.name}: need min <= mean <= max")
        if self.std_mult < 0:
            raise ValueError(f"{self.name}: std_mult must be >= 0")


NORMAL = SpeedClass("Normal", 1.0, 0.1, 0.9, 1.1)
OVER_SPEED = SpeedClass("OverSpeed", 1.25, 0.1, 1.2, 1.3)
UNDER_SPEED = SpeedClass("UnderSpeed", 0.75, 0.1, 0.7, 0.8)
SPEED_CLASSES = {c.name: c for c in (NORMAL, OVER_SPEED, UNDER_SPEED)}


class Shape(str, Enum):
    STRAIGHT = "Straight"
    CURVED = "Curved"
    WITH_TURNS = "WithTurns"


class Scenario(str, Enum):
    CONSTANT = "Constant"
    RAISE = "Raise"
    DECLINE = "Decline"


@dataclass(frozen=True)
class ScenarioKind:
    kind: Scenario
    limit_before: float
    limit_after: float
    change_time: float = 0.0

    def __post_init__(self):
        ok = {
            Scenario.CONSTANT: self.limit_after == self.limit_before,
            Scenario.RAISE: self.limit_after > self.limit_before,
            Scenario.DECLINE: self.limit_after < self.limit_before,
        }[Scenario(self.kind)]
        if not ok:
            raise ValueError(f"{self.kind}: inconsistent limits {self.limit_before} -> {self.limit_after}")

    def limit_at(self, t: float) -> float:
        return self.limit_after if t >= self.change_time else self.limit_before


@dataclass(frozen=True)
class StreetProfile:
    street_id: str
    length: float
    lanes: int
    speed_limit: float
    shape: Shape = Shape.STRAIGHT
    heading: float = 0.0  # radians, direction of travel at the street start (0 = +x)

    def __post_init__(self):
        if not self.length > 0 or not self.speed_limit > 0 or self.lanes < 1:
            raise ValueError(f"street {self.street_id}: length, limit and lanes must be positive")

    def position(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map arc length along the centerline to (x, y); starts at the origin."""
        x, y = self._local(np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length))
        if self.heading == 0.0:
            return x, y
        c, sn = math.cos(self.heading), math.sin(self.heading)
        return c * x - sn * y, sn * x + c * y

    def _local(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        shape = Shape(self.shape)
        if shape is Shape.STRAIGHT:
            return s.copy(), np.zeros_like(s)
        if shape is Shape.CURVED:
            # quarter circle over the whole street
            r = self.length / (math.pi / 2)
            return r * np.sin(s / r), r * (1.0 - np.cos(s / r))
        # three equal legs: east, north, east
        leg = self.length / 3.0
        x, y = np.zeros_like(s), np.zeros_like(s)
        for k, h in enumerate((0.0, math.pi / 2, 0.0)):
            seg = np.clip(s - k * leg, 0.0, leg)
            x += seg * math.cos(h)
            y += seg * math.sin(h)
        return x, y


DEFAULT_TRAIN_STREET = StreetProfile("train-straight", 2500.0, 2, 50 * KMH, Shape.STRAIGHT)
DEFAULT_TEST_STREETS = (
    StreetProfile("street-1", 1500.0, 1, 40 * KMH, Shape.WITH_TURNS),  # includes turnings
    StreetProfile("street-2", 3500.0, 2, 50 * KMH, Shape.CURVED),  # curved and longest
    StreetProfile("street-3", 2500.0, 2, 50 * KMH, Shape.STRAIGHT),  # straight, like training
    StreetProfile("street-4", 3000.0, 3, 80 * KMH, Shape.STRAIGHT, heading=-math.pi / 2),  # north to south
)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_flows: int = 100
    m: int = 5
    T: int = 60
    rate_hz: float = 1.0
    streets: List[StreetProfile] = field(default_factory=lambda: [DEFAULT_TRAIN_STREET])
    scenario_mix: Dict[str, float] = field(default_factory=lambda: {"Constant": 1.0, "Raise": 1.0, "Decline": 1.0})
    abnormal_fraction: float = 0.0
    abnormal_kind_mix: Dict[str, float] = field(default_factory=lambda: {"OverSpeed": 1.0, "UnderSpeed": 1.0})
    min_gap: float = 7.0
    accel_limit: float = 2.0
    headway_s: float = 6.0
    raise_factor: float = 1.6
    decline_factor: float = 0.6
    change_window: Tuple[float, float] = (0.3, 0.6)
    feature_spec: Tuple[str, ...] = DEFAULT_FEATURES

    def validate(self):
        if not self.streets:
            raise ValueError("generator needs at least one street")
        if self.m < 2:
            raise ValueError("fleet size m must be >= 2")
        if self.T < 1 or not self.rate_hz > 0:
            raise ValueError("T and rate_hz must be positive")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ValueError("abnormal_fraction must lie in [0, 1]")
        for name, mix in (("scenario_mix", self.scenario_mix), ("abnormal_kind_mix", self.abnormal_kind_mix)):
            if any(w < 0 for w in mix.values()) or not sum(mix.values()) > 0:
                raise ValueError(f"{name} weights must be nonnegative with positive sum")
        if not self.min_gap > 0 or not self.accel_limit > 0:
            raise ValueError("min_gap and accel_limit must be positive")
        if not self.raise_factor > 1 or not 0 < self.decline_factor < 1:
            raise ValueError("raise_factor must be > 1 and decline_factor in (0, 1)")


def sample_target_speed(cls: SpeedClass, limit: float, rng: np.random.Generator) -> float:
    """Gaussian(mean*limit, std*limit) truncated to [min*limit, max*limit] by rejection."""
    if not limit > 0:
        raise ValueError("limit must be positive")
    return limit * sample_multiplier(cls, rng)


def sample_multiplier(cls: SpeedClass, rng: np.random.Generator) -> float:
    if cls.std_mult == 0:
        return cls.mean_mult
    while True:
        v = rng.normal(cls.mean_mult, cls.std_mult)
        if cls.min_mult <= v <= cls.max_mult:
            return float(v)


def make_scenario(kind: Scenario, street: StreetProfile, cfg: GeneratorConfig, rng) -> ScenarioKind:
    kind = Scenario(kind)
    limit = street.speed_limit
    if kind is Scenario.CONSTANT:
        return ScenarioKind(kind, limit, limit, 0.0)
    duration = cfg.T / cfg.rate_hz
    lo, hi = cfg.change_window
    change = float(rng.uniform(lo, hi)) * duration
    factor = cfg.raise_factor if kind is Scenario.RAISE else cfg.decline_factor
    return ScenarioKind(kind, limit, limit * factor, change)


def generate_fleet(
    cfg: GeneratorConfig,
    street: StreetProfile,
    scenario: ScenarioKind,
    abnormal: Optional[AnomalyKind],
    rng: np.random.Generator,
    flow_id: str = "flow",
    classes: Optional[Dict[str, SpeedClass]] = None,
) -> FleetFlow:
    """Roll out one fleet of ``cfg.m`` vehicles for ``cfg.T`` steps."""
    classes = classes or SPEED_CLASSES
    m, T, dt = cfg.m, cfg.T, 1.0 / cfg.rate_hz
    if m < 2:
        raise ValueError("fleet size m must be >= 2")

    odd = int(rng.integers(m)) if abnormal is not None else -1
    mult = np.array(
        [
            sample_multiplier(classes[AnomalyKind(abnormal).value] if k == odd else classes["Normal"], rng)
            for k in range(m)
        ]
    )
    lane = np.arange(m) % street.lanes
    # member 0 leads; rear vehicle starts at the beginning of the street
    spacing = max(cfg.headway_s * scenario.limit_before, cfg.min_gap * 2)
    s = (m - 1 - np.arange(m)) * spacing
    v = mult * scenario.limit_before

    pos = np.empty((T, m))
    spd = np.empty((T, m))
    pos[0], spd[0] = s, v
    hit_end = False
    for step in range(1, T):
        limit = scenario.limit_at(step * dt)
        target = mult * limit
        accel = np.clip((target - v) / dt, -cfg.accel_limit, cfg.accel_limit)
        v_new = v + accel * dt
        s_free = s + v_new * dt
        s_new = s_free.copy()
        if np.any(s_new > street.length):
            hit_end = True
            s_new = np.minimum(s_new, street.length)
        # front to back so each leader's new position is already known
        for k in range(1, m):
            for j in range(k - 1, -1, -1):
                if lane[j] == lane[k]:
                    s_new[k] = min(s_new[k], max(s_new[j] - cfg.min_gap, s[k]))
                    break
        # a clamped vehicle records the speed it actually achieved
        held = s_new < s_free
        v_new = np.where(held, (s_new - s) / dt, v_new)
        s, v = s_new, v_new
        pos[step], spd[step] = s, v

    times = np.arange(T) * dt
    members = []
    for k in range(m):
        x, y = street.position(pos[:, k])
        samples = np.column_stack([times, x, y, spd[:, k]])
        members.append(Trajectory(f"{flow_id}/v{k}", samples, cfg.rate_hz))
    flags: Dict[str, object] = {"scenario": Scenario(scenario.kind).value, "multipliers": mult.tolist()}
    if abnormal is not None:
        flags["abnormal_member"] = odd
    if hit_end:
        flags["street_too_short"] = True
    return FleetFlow(
        flow_id,
        members,
        Label.ABNORMAL if abnormal is not None else Label.NORMAL,
        street.street_id,
        AnomalyKind(abnormal) if abnormal is not None else None,
        flags,
    )


def _weighted_assignment(n: int, weights: Dict[str, float], rng) -> List[str]:
    """Exact proportional counts (largest remainder), then shuffled."""
    keys = sorted(weights)
    total = sum(weights.values())
    raw = [n * weights[k] / total for k in keys]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(keys)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    out = [k for k, c in zip(keys, counts) for _ in range(c)]
    rng.shuffle(out)
    return out


def generate_dataset(cfg: GeneratorConfig) -> Dataset:
    """Generate ``cfg.n_flows`` fleets; deterministic in ``cfg.seed``.

    Flow-level assignments come from the master stream; each rollout uses its
    own stream derived from ``(seed, flow_index)``.
    """
    cfg.validate()
    master = np.random.default_rng([cfg.seed, 0])
    n = cfg.n_flows
    n_abnormal = int(round(cfg.abnormal_fraction * n))
    abnormal_at = set(master.permutation(n)[:n_abnormal].tolist())
    kinds = iter(_weighted_assignment(n_abnormal, cfg.abnormal_kind_mix, master))
    scenarios = _weighted_assignment(n, cfg.scenario_mix, master)
    street_idx = [i % len(cfg.streets) for i in range(n)]
    master.shuffle(street_idx)

    width = max(4, len(str(n)))
    flows = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, 1, i])
        street = cfg.streets[street_idx[i]]
        scenario = make_scenario(Scenario(scenarios[i]), street, cfg, rng)
        kind = AnomalyKind(next(kinds)) if i in abnormal_at else None
        flows.append(generate_fleet(cfg, street, scenario, kind, rng, flow_id=f"f{i:0{width}d}"))
    return Dataset(flows, tuple(cfg.feature_spec), None, cfg.rate_hz, cfg.T)


# --- floating-car data ------------------------------------------------------------

FCD_HEADER = ("time", "vehicle_id", "x", "y", "speed")


def export_fcd(ds: Dataset, path) -> None:
    """Write a dataset as time-sorted FCD CSV (labels are not representable)."""
    rows = []
    for f in ds.flows:
        for t in f.members:
            for time, x, y, sp in t.samples:
                rows.append((time, t.vehicle_id, x, y, sp))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FCD_HEADER)
        for time, vid, x, y, sp in rows:
            w.writerow([repr(float(time)), vid, repr(float(x)), repr(float(y)), repr(float(sp))])


def _read_fcd_csv(path) -> List[Tuple[float, str, float, float, float]]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FCD_HEADER:
            raise DatasetError(f"{path}: expected header {','.join(FCD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                time, vid, x, y, sp = row
                records.append((float(time), vid, float(x), float(y), float(sp)))
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: malformed record {row!r}") from e
            if records[-1][4] < 0 or not all(map(math.isfinite, (records[-1][0], *records[-1][2:]))):
                raise DatasetError(f"{path}:{lineno}: invalid values in record {row!r}")
            if len(records) > 1 and records[-1][0] < records[-2][0]:
                raise DatasetError(f"{path}:{lineno}: timestamps out of order at record {row!r}")
    return records


def _read_fcd_xml(path) -> List[Tuple[float, str, float, float, float]]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise DatasetError(f"{path}: malformed XML: {e}") from e
    records = []
    for ts in root.iter("timestep"):
        try:
            time = float(ts.attrib["time"])
        except (KeyError, ValueError) as e:
            raise DatasetError(f"{path}: timestep without a valid time attribute") from e
        if records and time < records[-1][0]:
            raise DatasetError(f"{path}: timestamps out of order at timestep time={time}")
        for veh in ts.iter("vehicle"):
            try:
                rec = (time, veh.attrib["id"], float(veh.attrib["x"]), float(veh.attrib["y"]), float(veh.attrib["speed"]))
            except (KeyError, ValueError) as e:
                raise DatasetError(f"{path}: malformed vehicle record at time={time}: {veh.attrib}") from e
            if rec[4] < 0:
                raise DatasetError(f"{path}: negative speed for {rec[1]} at time={time}")
            records.append(rec)
    return records


def import_fcd(path, m: int = 5, T: int = 60, feature_spec: Sequence[str] = DEFAULT_FEATURES) -> Dataset:
    """Group FCD vehicles into fleets of ``m`` co-present vehicles.

    Vehicles are ordered by (first appearance, id) and chunked by ``m``; each
    chunk is cropped to its common time window and resampled to ``T`` steps.
    Chunks without a common window of at least two samples are skipped.
    """
    path = Path(path)
    records = _read_fcd_xml(path) if path.suffix.lower() == ".xml" else _read_fcd_csv(path)
    tracks: Dict[str, List[Tuple[float, float, float, float]]] = defaultdict(list)
    for time, vid, x, y, sp in records:
        if tracks[vid] and time <= tracks[vid][-1][0]:
            raise DatasetError(f"{path}: duplicate timestamp {time} for vehicle {vid}")
        tracks[vid].append((time, x, y, sp))
    order = sorted(tracks, key=lambda vid: (tracks[vid][0][0], vid))

    flows = []
    for g in range(len(order) // m):
        group = order[g * m : (g + 1) * m]
        arrs = [np.asarray(tracks[vid]) for vid in group]
        t0 = max(a[0, 0] for a in arrs)
        t1 = min(a[-1, 0] for a in arrs)
        if t1 <= t0:
            log.warning("skipping vehicles %s: fewer than %d co-present", group, m)
            continue
        members = []
        for vid, a in zip(group, arrs):
            members.append(resample_to_length(_crop(vid, a, t0, t1), T))
        flows.append(FleetFlow(f"fcd{g:04d}", members, Label.NORMAL, path.stem, None, {"provenance": "fcd-import", "labeled": False}))
    if len(order) % m:
        log.warning("%d trailing vehicle(s) did not fill a fleet of %d", len(order) % m, m)
    rate = flows[0].members[0].rate_hz if flows else 1.0
    return Dataset(flows, tuple(feature_spec), None, rate, T)


def _crop(vid: str, a: np.ndarray, t0: float, t1: float) -> Trajectory:
    """Interpolate a raw track onto an even grid spanning [t0, t1] at its native step."""
    steps = np.diff(a[:, 0])
    step = float(np.median(steps)) if len(steps) else 1.0
    n = int(round((t1 - t0) / step)) + 1
    times = t0 + (t1 - t0) * np.arange(n) / max(n - 1, 1)
    cols = [times] + [np.interp(times, a[:, 0], a[:, k]) for k in (1, 2, 3)]
    rate = (n - 1) / (t1 - t0)
    cols[0] = t0 + np.arange(n) / rate
    return Trajectory(vid, np.column_stack(cols), rate)
