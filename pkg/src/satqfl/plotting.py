"""Figures written next to the CSV/JSONL artefacts (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def _style(ax, xlabel, ylabel):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3)


def plot_report(report, out_dir) -> dict:
    """Accuracy, loss and communication-time curves for one run."""
    out = Path(out_dir)
    if not report.rows:
        return {}
    x = report.column("round")
    files = {}

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for col, lab in (("server_val_acc", "server val"), ("server_test_acc", "server test"), ("device_train_acc", "device train"), ("device_test_acc", "device test")):
        ax.plot(x, report.column(col), marker="o", ms=3, label=lab)
    ax.set_ylim(0, 1.02)
    _style(ax, "round", "accuracy")
    ax.legend(fontsize=8, frameon=False)
    files["fig_accuracy"] = _save(fig, out / "accuracy.png")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(x, report.column("server_val_loss"), marker="o", ms=3, label="server val")
    ax.plot(x, report.column("device_val_loss"), marker="s", ms=3, label="device val")
    _style(ax, "round", "cross-entropy")
    ax.legend(fontsize=8, frameon=False)
    files["fig_loss"] = _save(fig, out / "loss.png")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x, report.column("comm_time"), color="tab:gray")
    _style(ax, "round", "communication time [s]")
    files["fig_comm_time"] = _save(fig, out / "comm_time.png")
    return files


def plot_visibility(hours, primaries, n_satellites: int, out_dir) -> dict:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.step(hours, primaries, where="post", label="ground visible")
    ax.step(hours, n_satellites - np.asarray(primaries), where="post", label="ISL only")
    _style(ax, "hours since start", "satellites")
    ax.legend(fontsize=8, frameon=False)
    return {"fig_visibility": _save(fig, Path(out_dir) / "visibility.png")}


def plot_comparison(comparison, out_dir) -> dict:
    cols = [c for c in comparison.columns if c.endswith("_final") and "acc" in c]
    x = np.arange(len(cols))
    width = 0.8 / max(1, len(comparison.labels))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i, (lab, vals) in enumerate(zip(comparison.labels, comparison.values)):
        v = [vals[comparison.columns.index(c)] for c in cols]
        ax.bar(x + i * width, v, width, label=lab)
    ax.set_xticks(x + width * (len(comparison.labels) - 1) / 2)
    ax.set_xticklabels([c.replace("_final", "") for c in cols], rotation=20, fontsize=8)
    _style(ax, "", "final accuracy")
    ax.legend(fontsize=8, frameon=False)
    return {"fig_compare": _save(fig, Path(out_dir) / "compare.png")}
