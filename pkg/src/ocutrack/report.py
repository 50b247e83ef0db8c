"""Figure rendering for the CLI report paths.

Every figure lands next to its delimited output file (same stem, .png).
The Agg backend is forced so rendering works headless, and PNG metadata is
pinned so regenerated figures do not differ spuriously.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": "ocutrack"}


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def training_curves(epochs: list, path: Path) -> None:
    """Loss / pixel accuracy / IoU per epoch, one panel each."""
    xs = [e.epoch for e in epochs]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(xs, [e.mean_loss for e in epochs], marker=".")
    axes[0].set(xlabel="epoch", ylabel="mean BCE loss", yscale="log")
    axes[1].plot(xs, [e.pixel_accuracy for e in epochs], marker=".", color="tab:green")
    axes[1].set(xlabel="epoch", ylabel="pixel accuracy")
    axes[2].plot(xs, [e.iou for e in epochs], marker=".", color="tab:orange")
    axes[2].set(xlabel="epoch", ylabel="IoU")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    _save(fig, path)


def trace_figure(rows: list[dict], path: Path) -> None:
    """Gaze angles and per-frame latency over a tracking run."""
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    valid = [r for r in rows if r["valid"]]
    axes[0].plot([r["frame_index"] for r in valid],
                 [r["theta_h_deg"] for r in valid], label="horizontal", lw=1.2)
    axes[0].plot([r["frame_index"] for r in valid],
                 [r["theta_v_deg"] for r in valid], label="vertical", lw=1.2)
    axes[0].set(ylabel="gaze angle [deg]")
    axes[0].legend(loc="best")
    axes[1].plot([r["frame_index"] for r in rows],
                 [r["latency_ms"] for r in rows], color="tab:red", lw=1.0)
    axes[1].set(xlabel="frame", ylabel="latency [ms]")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    _save(fig, path)


def eval_histograms(columns: dict[str, list[float]], path: Path) -> None:
    """Histogram per error column (e.g. network vs classical center error)."""
    n = len(columns)
    fig, axes = plt.subplots(1, max(n, 1), figsize=(4.5 * max(n, 1), 3.5), squeeze=False)
    for ax, (name, values) in zip(axes[0], columns.items()):
        if values:
            ax.hist(values, bins=30, color="tab:blue", alpha=0.8)
        ax.set(xlabel=name, ylabel="count")
        ax.grid(True, alpha=0.3)
    _save(fig, path)
