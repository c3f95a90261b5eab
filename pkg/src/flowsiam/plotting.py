"""PNG figures drawn from an evaluation report and a training log.

Uses the non-interactive Agg backend; every figure is also reproducible from
the CSV files written next to it.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .compressor import TrainLogRecord  # noqa: E402
from .evaluation import EvalReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for name, m in report.methods.items():
        if m.ok and m.roc:
            ax.plot([p.x for p in m.roc], [p.y for p in m.roc], label=f"{name} (AUC {m.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.02), title="ROC")
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, Path(path))


def plot_pr(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for name, m in report.methods.items():
        if m.ok and m.pr:
            ax.plot([p.x for p in m.pr], [p.y for p in m.pr], label=name)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="Precision-recall")
    ax.legend(fontsize=8, loc="lower left")
    return _save(fig, Path(path))


def plot_confusion(report: EvalReport, path) -> Path:
    names = [n for n, m in report.methods.items() if m.ok]
    kinds = ("tp", "fp", "tn", "fn")
    x = np.arange(len(names))
    w = 0.2
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(names) + 2), 4))
    for k, kind in enumerate(kinds):
        vals = [getattr(report.methods[n].counts, kind) for n in names]
        ax.bar(x + (k - 1.5) * w, vals, w, label=kind.upper())
    ax.set_xticks(x, names, rotation=20, fontsize=8)
    ax.set(ylabel="flows", title="Confusion counts at calibrated threshold")
    ax.set_yscale("symlog", linthresh=10)
    ax.legend(fontsize=8, ncol=4)
    return _save(fig, Path(path))


def plot_training(records: Sequence[TrainLogRecord], path) -> Path:
    ep = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, [r.total for r in records], label="total")
    ax.plot(ep, [r.rloss for r in records], label="reconstruction")
    ax.plot(ep, [r.sim for r in records], label="similarity")
    ax.set(xlabel="epoch", ylabel="loss", yscale="log", title="Training loss")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def render_figures(report: EvalReport, out_dir, train_log: Optional[Sequence[TrainLogRecord]] = None) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_roc(report, out / "roc.png"), plot_pr(report, out / "pr.png"), plot_confusion(report, out / "confusion.png")]
    if train_log:
        paths.append(plot_training(train_log, out / "training_loss.png"))
    return paths
