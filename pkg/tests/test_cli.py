import json

import pytest

from flowsiam.cli import EXIT_BARS, EXIT_OK, EXIT_USAGE, main
from flowsiam.compressor import load_model, read_train_log
from flowsiam.core import Label, load_dataset, save_dataset, split_dataset

TINY = """
[experiment]
name = "tiny"
seed = 1
[generator]
m = 3
T = 10
train_flows = 12
eval_flows = 40
abnormal_fraction = 0.25
train_headings = 2
train_limits_kmh = [50.0]
[model]
h1 = 4
L = 2
[train]
epochs_max = 3
batch_flows = 6
[baselines]
iforest_trees = 10
iforest_subsample = 32
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return str(p)


def test_generate_train_score_evaluate(tmp_path, cfg, capsys):
    d = tmp_path / "data"
    assert main(["generate", "--config", cfg, "--out", str(d), "--fcd"]) == EXIT_OK
    train_ds, eval_ds = load_dataset(d / "train.json"), load_dataset(d / "eval.json")
    assert len(train_ds) == 12 and len(eval_ds) == 40 and (d / "eval_fcd.csv").exists()
    assert all(f.label is Label.NORMAL for f in train_ds.flows)

    model = tmp_path / "m.json"
    assert main(["train", "--config", cfg, "--data", str(d / "train.json"), "--model", str(model)]) == EXIT_OK
    assert load_model(model).epochs_trained == 3
    assert main(["train", "--config", cfg, "--data", str(d / "train.json"), "--model", str(model), "--resume", str(model), "--epochs", "2"]) == EXIT_OK
    assert load_model(model).epochs_trained == 5
    assert [r.epoch for r in read_train_log(tmp_path / "m.log.csv")] == [1, 2, 3, 4, 5]

    scores = tmp_path / "s.jsonl"
    assert main(["score", "--model", str(model), "--data", str(d / "eval.json"), "--out", str(scores), "--metric", "cosine"]) == EXIT_OK
    recs = [json.loads(x) for x in scores.read_text().splitlines()]
    assert len(recs) == 40 and recs[0]["method"] == "deepflow-cosine"

    _, calib, test = split_dataset(eval_ds, (0.0, 0.5, 0.5), seed=0)
    save_dataset(calib, d / "cal.json")
    save_dataset(test, d / "test.json")
    out = tmp_path / "rep"
    args = ["evaluate", "--config", cfg, "--model", str(model), "--calibration", str(d / "cal.json"), "--test", str(d / "test.json"), "--out", str(out), "--per-street"]
    assert main(args) == EXIT_OK
    doc = json.loads((out / "report.json").read_text())
    assert doc["threshold_kind"] == "per-street"
    assert set(doc["methods"]) == {"deepflow-mse", "deepflow-cosine", "dtw", "gak", "iforest"}
    assert (out / "roc.png").exists() and (out / "confusion.png").exists()
    assert "deepflow-mse" in capsys.readouterr().out


def test_repro_writes_artifacts_and_reports_bars(tmp_path, cfg, capsys):
    out = tmp_path / "run"
    code = main(["repro", "--config", cfg, "--out", str(out)])
    # three epochs on a toy corpus cannot clear the desk bars; the exit code says so
    assert code in (EXIT_OK, EXIT_BARS)
    text = capsys.readouterr().out
    for bar in ("detector-f1", "method-ordering", "loss-halving", "per-street-dominance"):
        assert bar in text
    for name in ("train.json", "calibration.json", "test.json", "model.json", "train_log.csv", "report.json",
                 "confusion.csv", "scores.jsonl", "roc.png", "pr.png", "confusion.png", "training_loss.png"):
        assert (out / name).exists(), name


def test_repro_no_figures(tmp_path, cfg):
    out = tmp_path / "run"
    main(["repro", "--config", cfg, "--out", str(out), "--no-figures", "--epochs", "1"])
    assert (out / "report.json").exists() and not list(out.glob("*.png"))


def test_usage_errors(tmp_path, cfg, capsys):
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope.json"), "--model", str(tmp_path / "m.json")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err
    assert main(["repro", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    assert main(["--threads", "0", "generate", "--out", str(tmp_path)]) == EXIT_USAGE
    d = tmp_path / "data"
    main(["generate", "--config", cfg, "--out", str(d), "--kind", "eval"])
    # abnormal flows are refused as training data, and nothing is written
    assert main(["train", "--config", cfg, "--data", str(d / "eval.json"), "--model", str(tmp_path / "m.json")]) == EXIT_USAGE
    assert not (tmp_path / "m.json").exists()
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_threads_flag(tmp_path, cfg):
    assert main(["--threads", "1", "generate", "--config", cfg, "--out", str(tmp_path), "--kind", "train"]) == EXIT_OK
