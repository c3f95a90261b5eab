"""End-to-end desk experiment: generate, train, calibrate, evaluate, check bars.

Shared by the ``repro`` command and the acceptance suite.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from . import baselines as bl
from .compressor import SiameseAutoencoder, TrainLogRecord, save_model, train, write_train_log
from .config import RunConfig
from .core import Dataset, fit_normalizer, save_dataset, split_dataset
from .detector import Metric, ScoreMode
from .evaluation import (
    EvalReport,
    Scorer,
    detector_scorer,
    dtw_scorer,
    evaluate_methods,
    gak_scorer,
    iforest_scorer,
    write_report,
)
from .simgen import generate_dataset

log = logging.getLogger(__name__)

PRIMARY = "deepflow-mse"
F1_BAR = 0.70
LOSS_EPOCH = 50


def make_corpora(cfg: RunConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """(train, calibration, test); train is all-Normal, the other two share one labelled corpus."""
    train_ds = generate_dataset(cfg.train_generator())
    ev = generate_dataset(cfg.eval_generator())
    _, calib, test = split_dataset(ev, (0.0, cfg.split.calibration, cfg.split.test), seed=cfg.seed)
    return train_ds, calib, test


def fit_model(cfg: RunConfig, train_ds: Dataset, on_epoch=None) -> Tuple[SiameseAutoencoder, List[TrainLogRecord]]:
    model = SiameseAutoencoder.init(
        d=len(train_ds.feature_spec), h1=cfg.model.h1, L=cfg.model.L, T=train_ds.T, seed=cfg.seed,
        feature_spec=tuple(train_ds.feature_spec), normalization=fit_normalizer(train_ds),
    )
    return train(model, train_ds, cfg.train_config(), on_epoch=on_epoch)


def build_scorers(cfg: RunConfig, model: SiameseAutoencoder) -> Dict[str, Scorer]:
    mode = ScoreMode(cfg.detector.score_mode)
    scorers: Dict[str, Scorer] = {
        "deepflow-mse": detector_scorer(model, Metric.MSE, mode),
        "deepflow-cosine": detector_scorer(model, Metric.COSINE, mode),
    }
    spec, norm = model.feature_spec, model.normalization
    b = cfg.baselines
    if "dtw" in b.methods:
        scorers["dtw"] = dtw_scorer(spec, norm, bl.DtwConfig(b.dtw_band))
    if "gak" in b.methods:
        scorers["gak"] = gak_scorer(spec, norm, b.gak_sigma, seed=cfg.seed)
    if "iforest" in b.methods:
        scorers["iforest"] = iforest_scorer(bl.IForestConfig(b.iforest_trees, b.iforest_subsample, cfg.seed))
    return scorers


@dataclass
class Bar:
    name: str
    passed: bool
    detail: str


@dataclass
class ReproResult:
    report: EvalReport
    train_log: List[TrainLogRecord]
    bars: List[Bar] = field(default_factory=list)
    seconds: float = 0.0
    files: List[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.bars)


def check_bars(report: EvalReport, train_log: List[TrainLogRecord]) -> List[Bar]:
    """The desk-experiment acceptance bars."""
    m = report.methods
    bars = []

    def f1(name):
        return m[name].f1 if name in m and m[name].ok else None

    main = f1(PRIMARY)
    bars.append(Bar("detector-f1", main is not None and main >= F1_BAR, f"{PRIMARY} F1 = {main} (bar {F1_BAR})"))
    others = {k: f1(k) for k in ("dtw", "iforest", "deepflow-cosine")}
    order_ok = (
        main is not None
        and all(v is not None for v in others.values())
        and main > others["dtw"]
        and main > others["iforest"]
        and main >= others["deepflow-cosine"]
    )
    bars.append(
        Bar(
            "method-ordering",
            order_ok,
            f"mse {main} vs dtw {others['dtw']}, iforest {others['iforest']}, cosine {others['deepflow-cosine']}",
        )
    )
    by_epoch = {r.epoch: r.total for r in train_log}
    if 1 in by_epoch and LOSS_EPOCH in by_epoch:
        ratio = by_epoch[LOSS_EPOCH] / by_epoch[1]
        bars.append(Bar("loss-halving", ratio < 0.5, f"loss(epoch {LOSS_EPOCH}) / loss(epoch 1) = {ratio:.4f}"))
    else:
        bars.append(Bar("loss-halving", False, f"training log lacks epoch 1 or {LOSS_EPOCH}"))
    if PRIMARY in m and m[PRIMARY].ok and m[PRIMARY].street_study:
        rows = m[PRIMARY].street_study
        ok = all(r.f1_individual >= r.f1_common for r in rows)
        detail = "; ".join(f"{r.street_id}: indiv {r.f1_individual:.3f} com {r.f1_common:.3f}" for r in rows)
        bars.append(Bar("per-street-dominance", ok, detail))
    else:
        bars.append(Bar("per-street-dominance", False, "no per-street study in report"))
    return bars


def run_repro(
    cfg: RunConfig, out_dir=None, figures: bool = True, on_epoch: Optional[Callable[[TrainLogRecord], None]] = None
) -> ReproResult:
    """Generate -> train -> calibrate -> evaluate; writes artifacts when ``out_dir`` is given."""
    t0 = time.perf_counter()
    train_ds, calib, test = make_corpora(cfg)
    log.info("corpora: %d train, %d calibration, %d test flows", len(train_ds), len(calib), len(test))
    model, records = fit_model(cfg, train_ds, on_epoch)
    log.info("trained %d epochs", model.epochs_trained)
    meta = {"experiment": cfg.name, "seed": cfg.seed, "config": cfg.to_dict(), "epochs_trained": model.epochs_trained}
    report = evaluate_methods(calib, test, build_scorers(cfg, model), "common", meta=meta, street_study=True)
    result = ReproResult(report, records, check_bars(report, records))
    result.seconds = time.perf_counter() - t0
    report.timing["repro_seconds"] = result.seconds
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, ds in (("train", train_ds), ("calibration", calib), ("test", test)):
            save_dataset(ds, out / f"{name}.json")
        save_model(model, out / "model.json")
        write_train_log(records, out / "train_log.csv")
        result.files = write_report(report, out, test)
        if figures:
            from .plotting import render_figures

            result.files += render_figures(report, out, records)
    return result
