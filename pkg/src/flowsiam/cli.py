"""Command-line entry point: generate, train, score, evaluate, repro.

Every command validates all of its inputs before writing anything, so a
failed run leaves no partial artifacts behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .compressor import (
    ModelFileError,
    SiameseAutoencoder,
    TrainingError,
    load_model,
    save_model,
    train,
    write_train_log,
)
from .config import ConfigError, RunConfig, load_config
from .core import DatasetError, Label, fit_normalizer, load_dataset, save_dataset
from .detector import Metric, ScoreMode, ThresholdPolicy, check_compatible, score_dataset
from .simgen import export_fcd, generate_dataset

log = logging.getLogger("flowsiam")

EXIT_OK, EXIT_BARS, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _need_file(p: Optional[str], what: str) -> Path:
    if not p:
        raise UsageError(f"missing {what}")
    path = Path(p)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# --- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _cfg(args)
    g = cfg.generator
    if args.flows is not None:
        g.train_flows = g.eval_flows = args.flows
    if args.fleet is not None:
        g.m = args.fleet
    if args.abnormal_fraction is not None:
        g.abnormal_fraction = args.abnormal_fraction
    cfg.validate()
    gens = {"train": cfg.train_generator(), "eval": cfg.eval_generator()}
    kinds = ["train", "eval"] if args.kind == "both" else [args.kind]
    for k in kinds:
        gens[k].validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in kinds:
        ds = generate_dataset(gens[k])
        save_dataset(ds, out / f"{k}.json")
        if args.fcd:
            export_fcd(ds, out / f"{k}_fcd.csv")
        n_ab = sum(f.label is Label.ABNORMAL for f in ds.flows)
        print(f"{k}: {len(ds)} flows, {ds.n_trajectories} trajectories, {n_ab} abnormal -> {out / f'{k}.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _cfg(args)
    if args.epochs is not None:
        cfg.train.epochs_max = args.epochs
    cfg.validate()
    ds = load_dataset(_need_file(args.data, "training dataset"))
    bad = [f.flow_id for f in ds.flows if f.label is not Label.NORMAL]
    if bad:
        raise UsageError(f"training data must be all Normal; abnormal flows: {', '.join(bad[:5])}")
    if args.resume:
        model = load_model(_need_file(args.resume, "model to resume"))
        if model.feature_spec != tuple(ds.feature_spec) or model.T != ds.T:
            raise UsageError("resume model does not match the dataset's features or T")
    else:
        model = SiameseAutoencoder.init(
            d=len(ds.feature_spec), h1=cfg.model.h1, L=cfg.model.L, T=ds.T, seed=cfg.seed,
            feature_spec=tuple(ds.feature_spec), normalization=fit_normalizer(ds),
        )
    model_out = Path(args.model)
    log_out = Path(args.log) if args.log else model_out.with_suffix(".log.csv")
    model, records = train(
        model, ds, cfg.train_config(),
        on_epoch=lambda r: log.info("epoch %d total %.6f rloss %.6f sim %.6f", r.epoch, r.total, r.rloss, r.sim),
    )
    model_out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_out)
    write_train_log(records, log_out, append=bool(args.resume) and log_out.exists())
    print(f"trained to epoch {model.epochs_trained}; final total loss {records[-1].total:.6f} -> {model_out}")
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(_need_file(args.model, "model"))
    ds = load_dataset(_need_file(args.data, "dataset"))
    check_compatible(model, ds)
    policy = None
    if args.thresholds:
        policy = ThresholdPolicy.from_dict(json.loads(_need_file(args.thresholds, "threshold file").read_text()))
    results = score_dataset(model, ds, Metric(args.metric), ScoreMode(args.score_mode), policy)
    fh = open(args.out, "w") if args.out and args.out != "-" else sys.stdout
    try:
        for r in results:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_methods, write_report
    from .pipeline import build_scorers

    cfg = _cfg(args)
    model = load_model(_need_file(args.model, "model"))
    calib = load_dataset(_need_file(args.calibration, "calibration dataset"))
    test = load_dataset(_need_file(args.test, "test dataset"))
    for ds in (calib, test):
        check_compatible(model, ds)
    labels = {f.label for f in calib.flows}
    if labels != {Label.NORMAL, Label.ABNORMAL}:
        raise UsageError("calibration dataset needs both Normal and Abnormal flows")
    kind = "per-street" if args.per_street else cfg.detector.threshold
    report = evaluate_methods(
        calib, test, build_scorers(cfg, model), kind,
        meta={"model": str(args.model), "calibration": str(args.calibration), "test": str(args.test)},
        street_study=args.per_street,
    )
    files = write_report(report, args.out, test)
    if not args.no_figures:
        from .plotting import render_figures

        files += render_figures(report, args.out)
    _print_summary(report)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_repro(args) -> int:
    from .pipeline import run_repro

    cfg = _cfg(args)
    if args.epochs is not None:
        cfg.train.epochs_max = args.epochs
    cfg.validate()
    out = Path(args.out or cfg.out_dir)
    res = run_repro(
        cfg, out, figures=not args.no_figures,
        on_epoch=lambda r: log.info("epoch %d total %.6f", r.epoch, r.total),
    )
    _print_summary(res.report)
    for b in res.bars:
        print(f"{'PASS' if b.passed else 'FAIL'} {b.name}: {b.detail}")
    print(f"repro finished in {res.seconds:.1f} s; artifacts in {out}")
    return EXIT_OK if res.passed else EXIT_BARS


def _print_summary(report) -> None:
    print(f"{'method':<18}{'precision':>10}{'recall':>8}{'f1':>8}{'auc':>8}{'ms/flow':>9}")
    for name, m in report.methods.items():
        if not m.ok:
            print(f"{name:<18} FAILED: {m.error}")
            continue
        auc = f"{m.auc:.3f}" if m.auc is not None else "-"
        print(f"{name:<18}{m.precision:>10.3f}{m.recall:>8.3f}{m.f1:>8.3f}{auc:>8}{m.mean_millis:>9.2f}")


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsiam", description="Fleet-trajectory anomaly detection experiments.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed (and FLOWSIAM_SEED)")

    g = sub.add_parser("generate", help="write synthetic train / evaluation datasets")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--kind", choices=["train", "eval", "both"], default="both")
    g.add_argument("--flows", type=int, help="flows per dataset")
    g.add_argument("--fleet", type=int, help="vehicles per flow (m)")
    g.add_argument("--abnormal-fraction", type=float)
    g.add_argument("--fcd", action="store_true", help="also export floating-car-data CSV")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the Siamese autoencoder on Normal flows")
    common(t)
    t.add_argument("--data", required=True, help="training dataset JSON")
    t.add_argument("--model", required=True, help="model output path")
    t.add_argument("--log", help="training log CSV (default: <model>.log.csv)")
    t.add_argument("--resume", help="continue training from this model file")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score flows; JSON lines to --out or stdout")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("--metric", choices=[m.value for m in Metric], default="mse")
    s.add_argument("--score-mode", choices=[m.value for m in ScoreMode], default="canonical")
    s.add_argument("--thresholds", help="threshold policy JSON; adds decisions")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("evaluate", help="calibrate and compare all methods")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--calibration", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--per-street", action="store_true", help="per-street thresholds and the street table")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("repro", help="one-shot desk experiment with acceptance bars")
    common(r)
    r.add_argument("--out", help="artifact directory (default: config out_dir)")
    r.add_argument("--epochs", type=int)
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_repro)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, ModelFileError, TrainingError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
