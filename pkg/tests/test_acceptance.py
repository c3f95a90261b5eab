"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk experiment runs through the ``repro`` command twice (same seed);
criteria 6-9 read the artifacts it writes.
"""
import csv
import json
import time

import numpy as np
import pytest

from _oracles import dtw_brute
from flowsiam.baselines import GakConfig, IForestConfig, c_factor, dtw_distance, gak_gram, iforest_fit
from flowsiam.cli import main
from flowsiam.compressor import SiameseAutoencoder, batch_loss_and_grads, rloss, sim
from flowsiam.config import load_config
from flowsiam.core import Label, load_dataset
from flowsiam.detector import abnormality_score
from flowsiam.evaluation import strip_timing
from flowsiam.metrics import f1_from
from flowsiam.neuralnet import grad_check

# --- 1: gradient correctness ------------------------------------------------------------


def test_criterion_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for seed in range(4):  # 284 parameters per toy model, all checked
        rng = np.random.default_rng(seed)
        model = SiameseAutoencoder.init(d=2, h1=3, L=2, T=4, seed=seed, feature_spec=("x", "y"))
        batch = rng.uniform(-1, 1, size=(1, 2, 4, 2))
        _, _, _, grads = batch_loss_and_grads(model, batch, 1.0)
        params = model.tensors()

        def loss():
            model.set_tensors(params)
            return batch_loss_and_grads(model, batch, 1.0)[0]

        rep = grad_check(loss, params, grads, tolerance=1e-4)
        worst, n = max(worst, rep.max_rel_error), n + rep.n_checked
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and n >= 1000 and secs < 10
    verdict(1, ok, f"{n} coordinates, max relative error {worst:.2e} (< 1e-4), {secs:.1f} s (< 10 s)")
    assert ok


# --- 2: loss bounds -------------------------------------------------------------------------


def test_criterion_2_loss_bounds(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    N = 100_000
    # inputs range over the clipped window domain [-1.5, 1.5]; latents are LSTM outputs in (-1, 1)
    Y = rng.uniform(-1.5, 1.5, size=(N, 12))
    Z = rng.uniform(-1.5, 1.5, size=(N, 12))
    r = np.tanh(np.mean((Y - Z) ** 2, axis=1))
    A = rng.uniform(-1, 1, size=(N, 4))
    B = rng.uniform(-1, 1, size=(N, 4))
    s = np.tanh(np.mean((A - B) ** 2, axis=1))
    # spot-check the vectorised expressions against the library functions
    idx = rng.choice(N, 500, replace=False)
    same = all(rloss(Y[i], Z[i]) == r[i] and sim(A[i], B[i]) == s[i] for i in idx)
    lat = rng.uniform(-1, 1, size=(N // 10, 5, 3))
    scores = np.array([abnormality_score(x) for x in lat])
    perm_exact = all(
        abnormality_score(x[p]) == sc for x, sc, p in zip(lat[:2000], scores[:2000], (rng.permutation(5) for _ in range(2000)))
    )
    secs = time.perf_counter() - t0
    ok = (
        bool(np.all((r >= 0) & (r < 1)) and np.all((s >= 0) & (s < 1)) and np.all((scores >= 0) & (scores <= 1)))
        and same and perm_exact and secs < 10
    )
    verdict(
        2, ok,
        f"{N} rloss/sim samples in [0,1), {len(scores)} scores in [0,1], permutation exact={perm_exact}, {secs:.1f} s",
    )
    assert ok


# --- 3: DTW oracle ---------------------------------------------------------------------------


def test_criterion_3_dtw_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(500):
        n, m, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 3)
        a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        # both sum a path's costs in path order and rounding is monotone, so the minima agree bit for bit
        mismatches += dtw_distance(a, b) != dtw_brute(a, b)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 30
    verdict(3, ok, f"500 pairs, {mismatches} mismatches against path enumeration, {secs:.1f} s (< 30 s)")
    assert ok


# --- 4: GAK positive semidefinite -----------------------------------------------------------


def test_criterion_4_gak_psd(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = np.inf
    for _ in range(50):
        series = [rng.normal(size=(int(rng.integers(5, 31)), 3)) for _ in range(20)]
        G = gak_gram(series, GakConfig(float(rng.uniform(0.5, 3.0))), normalized=True)
        worst = min(worst, float(np.linalg.eigvalsh(G).min()))
    secs = time.perf_counter() - t0
    ok = worst >= -1e-8 and secs < 60
    verdict(4, ok, f"50 Gram matrices of 20 series, min eigenvalue {worst:.3e} (>= -1e-8), {secs:.1f} s (< 60 s)")
    assert ok


# --- 5: iForest sanity --------------------------------------------------------------------------


def test_criterion_5_iforest(verdict):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(64, 4))
        k = int(rng.integers(len(X)))
        X[k] = X[k] + 100.0 * rng.choice([-1.0, 1.0], size=4)
        s = iforest_fit(X, IForestConfig(seed=seed)).score(X)
        hits += int(np.argmax(s) == k)
    secs = time.perf_counter() - t0
    ok = hits >= 95 and c_factor(2) == 1.0 and secs < 30
    verdict(5, ok, f"planted outlier ranked first in {hits}/100 runs; c(2) = {c_factor(2)!r}; {secs:.1f} s (< 30 s)")
    assert ok


# --- 6-9: desk experiment -------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Run ``repro`` twice with the default (seeded) configuration."""
    runs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"desk{k}")
        t0 = time.perf_counter()
        # the first run renders figures like a default invocation; the second skips them
        code = main(["repro", "--out", str(out)] + (["--no-figures"] if k else []))
        runs.append({"out": out, "code": code, "seconds": time.perf_counter() - t0})
    return runs


def _report(out):
    return json.loads((out / "report.json").read_text())


def _train_log(out):
    with open(out / "train_log.csv") as fh:
        return {int(r["epoch"]): float(r["total"]) for r in csv.DictReader(fh)}


def test_criterion_6_desk_experiment(desk, verdict):
    run = desk[0]
    out = run["out"]
    rep = _report(out)
    cfg = load_config(env={})
    train, calib, test = (load_dataset(out / f"{n}.json") for n in ("train", "calibration", "test"))
    shape_ok = (
        len(train) == 300 and all(f.m == 5 and f.label is Label.NORMAL for f in train.flows)
        and len({f.flags.get("scenario") for f in train.flows}) == 3
        and len(calib) == 60 and len(test) == 240
        and len(set(calib.streets()) | set(test.streets())) == 4
    )
    n_ab = sum(f.label is Label.ABNORMAL for f in calib.flows + test.flows)
    f1 = {k: v.get("f1") for k, v in rep["methods"].items()}
    log = _train_log(out)
    ratio = log[50] / log[1]
    bar_a = f1["deepflow-mse"] >= 0.70
    bar_b = f1["deepflow-mse"] > f1["dtw"] and f1["deepflow-mse"] > f1["iforest"] and f1["deepflow-mse"] >= f1["deepflow-cosine"]
    bar_c = ratio < 0.5
    epochs_ok = max(log) <= cfg.train.epochs_max <= 300
    fast = run["seconds"] < 600
    ok = shape_ok and epochs_ok and bar_a and bar_b and bar_c and fast
    verdict(
        6, ok,
        f"corpus ok={shape_ok} ({n_ab}/300 abnormal), {max(log)} epochs; "
        f"(a) mse F1 {f1['deepflow-mse']:.4f} >= 0.70: {bar_a}; "
        f"(b) vs dtw {f1['dtw']:.4f}, iforest {f1['iforest']:.4f}, cosine {f1['deepflow-cosine']:.4f}: {bar_b}; "
        f"(c) loss50/loss1 {ratio:.4f} < 0.5: {bar_c}; runtime {run['seconds']:.0f} s (< 600 s): {fast}",
    )
    assert ok


def test_criterion_7_per_street_dominance(desk, verdict):
    rows = _report(desk[0]["out"])["methods"]["deepflow-mse"]["street_study"]
    ok = len(rows) == 4 and all(r["f1_individual"] >= r["f1_common"] for r in rows)
    detail = "; ".join(f"{r['street_id']} indiv {r['f1_individual']:.3f} >= com {r['f1_common']:.3f}" for r in rows)
    verdict(7, ok, detail)
    assert ok


def test_criterion_8_metric_consistency(desk, verdict):
    methods = _report(desk[0]["out"])["methods"]
    worst = max(abs(f1_from(m["precision"], m["recall"]) - m["f1"]) for m in methods.values() if "f1" in m)
    published = f1_from(0.8696, 0.7127)
    ok = worst <= 1e-12 and abs(published - 0.7834) <= 5e-5
    verdict(8, ok, f"max |F1(p, r) - stored F1| = {worst:.1e} (<= 1e-12); F1(0.8696, 0.7127) = {published:.6f} (0.7834 +- 5e-5)")
    assert ok


def test_criterion_9_determinism(desk, verdict):
    a, b = (json.dumps(strip_timing(_report(r["out"])), indent=2, sort_keys=True) for r in desk)
    same_model = (desk[0]["out"] / "model.json").read_bytes() == (desk[1]["out"] / "model.json").read_bytes()
    ok = a == b and same_model
    verdict(9, ok, f"report.json without timing identical: {a == b}; model.json identical: {same_model}")
    assert ok
