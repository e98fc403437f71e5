"""Report figures: per-cell accuracy bars, recall@k curve, training loss."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from groundgen.evaluation import EvalReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# keep PNG bytes stable between runs
_METADATA = {"Software": None}


def _new(figsize=(4.5, 3.0)):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize)
    return fig, ax


def _save(fig, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_accuracy_cells(report: EvalReport, path: str | Path) -> Path:
    keys = list(report.acc)
    values = [report.acc[k] if report.acc[k] is not None else 0.0 for k in keys]
    fig, ax = _new()
    bars = ax.bar(range(len(keys)), values, color=["#4c72b0", "#dd8452"] * (len(keys) // 2 + 1))
    for bar, key in zip(bars, keys):
        label = "n/a" if report.acc[key] is None else f"{report.acc[key]:.3f}"
        ax.annotate(label, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_xticks(range(len(keys)), keys)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    title = "per-cell accuracy"
    if report.hm_overall is not None:
        title += f" (overall hm {report.hm_overall:.3f})"
    ax.set_title(title)
    return _save(fig, Path(path))


def plot_recall_curve(report: EvalReport, path: str | Path) -> Path:
    ks = sorted(report.recall_at_k)
    fig, ax = _new()
    ax.plot(ks, [report.recall_at_k[k] for k in ks], marker="o", lw=1.2)
    ax.set_xscale("log")
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0, 1.05)
    ax.set_title("retrieval recall")
    return _save(fig, Path(path))


def plot_loss_curve(history: Sequence[dict], path: str | Path) -> Path:
    steps = [h["step"] for h in history]
    fig, ax = _new()
    for key, label in (("total", "total"), ("lm_loss", "LM"), ("contrastive_loss", "query-to-entity")):
        ax.plot(steps, [h[key] for h in history], lw=1.0, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def write_cells_tsv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cell", "count", "accuracy"])
        for key, value in report.acc.items():
            w.writerow([key, report.counts[key], "" if value is None else f"{value:.6f}"])
        for name in ("hm_entity", "hm_query", "hm_overall"):
            value = getattr(report, name)
            w.writerow([name, "", "" if value is None else f"{value:.6f}"])
        for k, value in sorted(report.recall_at_k.items()):
            w.writerow([f"recall@{k}", "", f"{value:.6f}"])
    return path


def write_history_tsv(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    cols = ["step", "total", "lm_loss", "contrastive_loss", "tau"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for h in history:
            w.writerow([h["step"]] + [f"{h[c]:.8g}" for c in cols[1:]])
    return path


def write_report_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_cells_tsv(report, out / "cells.tsv"), plot_accuracy_cells(report, out / "accuracy_cells.png")]
    if report.recall_at_k:
        paths.append(plot_recall_curve(report, out / "recall_at_k.png"))
    return paths


def write_training_figures(history: Sequence[dict], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [write_history_tsv(history, out / "history.tsv"), plot_loss_curve(history, out / "loss_curve.png")]
