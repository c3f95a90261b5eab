"""Experiment configuration: one TOML document with a section per module.

Missing keys fall back to the dataclass defaults; unknown keys are errors so
typos do not silently change an experiment.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .compressor import TrainConfig
from .core import DEFAULT_FEATURES
from .detector import Metric, ScoreMode
from .simgen import DEFAULT_TEST_STREETS, DEFAULT_TRAIN_STREET, KMH, GeneratorConfig, StreetProfile

SEED_ENV = "FLOWSIAM_SEED"
METHODS = ("deepflow-mse", "deepflow-cosine", "dtw", "gak", "iforest")


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorSection:
    m: int = 5
    T: int = 60
    rate_hz: float = 1.0
    train_flows: int = 300
    eval_flows: int = 300
    abnormal_fraction: float = 0.15
    train_headings: int = 8  # straight training streets at this many evenly spaced headings
    train_limits_kmh: Tuple[float, ...] = (40.0, 50.0, 80.0)  # ... and at each of these speed limits
    min_gap: float = 7.0
    accel_limit: float = 2.0
    headway_s: float = 6.0
    raise_factor: float = 1.6
    decline_factor: float = 0.6
    feature_spec: Tuple[str, ...] = DEFAULT_FEATURES


@dataclass
class ModelSection:
    h1: int = 16
    L: int = 6


@dataclass
class TrainSection:
    lam: float = 1.0
    epochs_max: int = 300
    batch_flows: int = 32
    lr: float = 2e-3
    patience: int = 60
    min_delta: float = 1e-5


@dataclass
class DetectorSection:
    metric: str = "mse"
    score_mode: str = "canonical"
    threshold: str = "common"  # or "per-street"


@dataclass
class BaselineSection:
    methods: Tuple[str, ...] = ("dtw", "gak", "iforest")
    dtw_band: Optional[int] = None
    gak_sigma: Any = "median"
    iforest_trees: int = 100
    iforest_subsample: int = 256


@dataclass
class SplitSection:
    calibration: float = 0.2
    test: float = 0.8


@dataclass
class RunConfig:
    name: str = "desk"
    seed: int = 0
    out_dir: str = "runs/desk"
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    split: SplitSection = field(default_factory=SplitSection)

    def validate(self) -> "RunConfig":
        g = self.generator
        if g.m < 2 or g.T < 2 or not g.rate_hz > 0:
            raise ConfigError("generator: need m >= 2, T >= 2, rate_hz > 0")
        if g.train_flows < 1 or g.eval_flows < 2 or g.train_headings < 1:
            raise ConfigError("generator: train_flows, eval_flows and train_headings must be positive")
        if not g.train_limits_kmh or min(g.train_limits_kmh) <= 0:
            raise ConfigError("generator: train_limits_kmh must be a non-empty list of positive speeds")
        if not 0 <= g.abnormal_fraction <= 1:
            raise ConfigError("generator: abnormal_fraction must lie in [0, 1]")
        if self.model.h1 < 1 or self.model.L < 1:
            raise ConfigError("model: h1 and L must be positive")
        if self.model.L >= g.T * len(g.feature_spec):
            raise ConfigError("model: L must be smaller than T*d (bottleneck)")
        try:
            self.train_config().validate()
            Metric(self.detector.metric)
            ScoreMode(self.detector.score_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.detector.threshold not in ("common", "per-street"):
            raise ConfigError(f"detector.threshold must be 'common' or 'per-street', got {self.detector.threshold!r}")
        for meth in self.baselines.methods:
            if meth not in ("dtw", "gak", "iforest"):
                raise ConfigError(f"unknown baseline {meth!r}")
        sig = self.baselines.gak_sigma
        if sig != "median" and not (isinstance(sig, (int, float)) and sig > 0):
            raise ConfigError("baselines.gak_sigma must be 'median' or a positive number")
        fr = (self.split.calibration, self.split.test)
        if min(fr) <= 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ConfigError("split fractions must be positive and sum to 1")
        return self

    # --- derived module configs ------------------------------------------------

    def _gen(self, seed: int, n: int, streets: List[StreetProfile], abnormal: float) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(
            seed=seed, n_flows=n, m=g.m, T=g.T, rate_hz=g.rate_hz, streets=streets,
            abnormal_fraction=abnormal, min_gap=g.min_gap, accel_limit=g.accel_limit,
            headway_s=g.headway_s, raise_factor=g.raise_factor, decline_factor=g.decline_factor,
            feature_spec=tuple(g.feature_spec),
        )

    def train_generator(self) -> GeneratorConfig:
        return self._gen(2 * self.seed, self.generator.train_flows, train_streets(self.generator.train_headings, self.generator.train_limits_kmh), 0.0)

    def eval_generator(self) -> GeneratorConfig:
        g = self.generator
        return self._gen(2 * self.seed + 1, g.eval_flows, list(DEFAULT_TEST_STREETS), g.abnormal_fraction)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lam=t.lam, epochs_max=t.epochs_max, batch_flows=t.batch_flows, lr=t.lr,
            seed=self.seed, patience=t.patience, min_delta=t.min_delta,
        )

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["generator"]["feature_spec"] = list(self.generator.feature_spec)
        d["baselines"]["methods"] = list(self.baselines.methods)
        d["generator"]["train_limits_kmh"] = list(self.generator.train_limits_kmh)
        return d


def train_streets(n_headings: int, limits_kmh=None) -> List[StreetProfile]:
    """The straight training street at evenly spaced headings and, optionally, several speed limits."""
    base = DEFAULT_TRAIN_STREET
    limits = [base.speed_limit] if not limits_kmh else [v * KMH for v in limits_kmh]
    if n_headings == 1 and len(limits) == 1:
        return [replace(base, speed_limit=limits[0])]
    return [
        replace(base, street_id=f"{base.street_id}-{k}-{v / KMH:g}", heading=2 * math.pi * k / n_headings, speed_limit=v)
        for k in range(n_headings)
        for v in limits
    ]


_SECTIONS = {
    "generator": GeneratorSection,
    "model": ModelSection,
    "train": TrainSection,
    "detector": DetectorSection,
    "baselines": BaselineSection,
    "split": SplitSection,
}
_TUPLE_KEYS = {("generator", "feature_spec"), ("generator", "train_limits_kmh"), ("baselines", "methods")}


def _section(name: str, cls, raw: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    vals = {k: tuple(v) if (name, k) in _TUPLE_KEYS else v for k, v in raw.items()}
    return cls(**vals)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    exp = raw.pop("experiment", {})
    unknown = set(exp) - {"name", "seed", "out_dir"}
    unknown |= set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys or sections: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**exp, **{k: _section(k, cls, raw.get(k, {})) for k, cls in _SECTIONS.items()})
    return cfg


def load_config(path: Optional[os.PathLike] = None, env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Read a TOML config (or defaults when ``path`` is None); FLOWSIAM_SEED overrides the seed."""
    raw: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
    cfg = config_from_dict(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from e
    return cfg.validate()
