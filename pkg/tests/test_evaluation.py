import csv
import json

import numpy as np
import pytest

from flowsiam.core import Label, split_dataset
from flowsiam.evaluation import (
    dtw_scorer,
    evaluate_method,
    evaluate_methods,
    f1_at,
    gak_scorer,
    iforest_scorer,
    strip_timing,
    write_report,
)
from flowsiam.core import fit_normalizer
from flowsiam.metrics import f1_from
from flowsiam.simgen import DEFAULT_TEST_STREETS, GeneratorConfig, generate_dataset


@pytest.fixture(scope="module")
def corpus():
    ds = generate_dataset(
        GeneratorConfig(seed=9, n_flows=40, m=3, T=12, streets=list(DEFAULT_TEST_STREETS), abnormal_fraction=0.25)
    )
    _, calib, test = split_dataset(ds, (0.0, 0.5, 0.5), seed=0)
    return calib, test


def oracle_scorer(noise=0.0, seed=0):
    """Scores from labels, optionally blurred, so expected metrics are known."""

    def run(calib, test):
        rng = np.random.default_rng(seed)

        def s(ds):
            y = np.array([f.label is Label.ABNORMAL for f in ds.flows], dtype=float)
            return 0.2 + 0.6 * y + noise * rng.normal(size=len(y))

        return s(calib), s(test), np.ones(len(test))

    return run


def broken_scorer(calib, test):
    raise RuntimeError("boom")


def test_f1_at_per_flow_thresholds():
    assert f1_at([0.5, 0.5], [True, False], [0.4, 0.6]) == 1.0
    assert f1_at([0.5], [True], [0.5]) == 0.0


def test_perfect_scorer_gets_perfect_metrics(corpus):
    calib, test = corpus
    rep = evaluate_method("oracle", oracle_scorer(), calib, test)
    assert rep.f1 == 1.0 and rep.auc == 1.0 and rep.precision == rep.recall == 1.0
    assert rep.counts.total == len(test)
    assert rep.f1 == f1_from(rep.precision, rep.recall)


def test_street_study_dominance(corpus):
    calib, test = corpus
    rep = evaluate_method("noisy", oracle_scorer(0.3, seed=4), calib, test, street_study=True)
    assert {r.street_id for r in rep.street_study} == set(calib.streets())
    assert all(r.f1_individual >= r.f1_common for r in rep.street_study)
    per = evaluate_method("noisy", oracle_scorer(0.3, seed=4), calib, test, threshold_kind="per-street")
    assert per.policy.kind == "per-street" and per.street_study


def test_failing_method_is_isolated(corpus):
    calib, test = corpus
    report = evaluate_methods(calib, test, {"good": oracle_scorer(), "bad": broken_scorer})
    assert report.methods["good"].ok
    assert not report.methods["bad"].ok and "boom" in report.methods["bad"].error
    assert set(report.timing) == {"good_seconds", "bad_seconds", "total_seconds"}


def test_write_report_files(tmp_path, corpus):
    calib, test = corpus
    report = evaluate_methods(calib, test, {"a": oracle_scorer(0.2), "bad": broken_scorer}, meta={"seed": 1})
    files = write_report(report, tmp_path, test)
    names = sorted(p.name for p in files)
    assert names == ["confusion.csv", "pr_a.csv", "report.json", "roc_a.csv", "scores.jsonl"]
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["methods"]["bad"] == {"method": "bad", "error": "RuntimeError: boom"}
    a = doc["methods"]["a"]
    assert abs(f1_from(a["precision"], a["recall"]) - a["f1"]) <= 1e-12
    with open(tmp_path / "confusion.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["a"]
    assert sum(int(rows[0][k]) for k in ("tp", "fp", "tn", "fn")) == len(test)
    roc = (tmp_path / "roc_a.csv").read_text().splitlines()
    assert roc[0] == "threshold,fpr,tpr"
    recs = [json.loads(line) for line in (tmp_path / "scores.jsonl").read_text().splitlines()]
    assert len(recs) == len(test) and {r["method"] for r in recs} == {"a"}
    assert all((r["decision"] == "Abnormal") == (r["score"] > r["theta"]) for r in recs)


def test_strip_timing():
    doc = {"a": 1, "timing": {"x": 2.0}, "methods": {"m": {"mean_millis": 3.0, "f1": 0.5}}, "l": [{"mean_millis": 1}]}
    assert strip_timing(doc) == {"a": 1, "methods": {"m": {"f1": 0.5}}, "l": [{}]}


def test_baseline_scorers_run_and_are_deterministic(corpus):
    calib, test = corpus
    norm = fit_normalizer(calib)
    spec = calib.feature_spec
    for scorer in (dtw_scorer(spec, norm), gak_scorer(spec, norm), iforest_scorer()):
        c1, t1, ms = scorer(calib, test)
        c2, t2, _ = scorer(calib, test)
        assert c1.shape == (len(calib),) and t1.shape == ms.shape == (len(test),)
        np.testing.assert_array_equal(t1, t2)
        assert np.all((t1 >= 0) & (t1 <= 1))
