"""Matplotlib renderings written next to the delimited outputs.

All figures use the Agg backend with fixed sizes and no timestamps, so
repeated runs produce byte-identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 110


def save_loss_curve(logs, path):
    """Mean loss and training mA per epoch from the training log entries."""
    epochs = [e.epoch for e in logs]
    fig, ax = plt.subplots(figsize=(6.0, 3.6), dpi=_DPI)
    ax.plot(epochs, [e.mean_loss for e in logs], color="tab:red", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:red")
    ma = [e.ma_train for e in logs]
    if np.any(np.isfinite(ma)):
        ax2 = ax.twinx()
        ax2.plot(epochs, ma, color="tab:blue", label="train mA")
        ax2.set_ylabel("train mA", color="tab:blue")
        ax2.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_eval_bars(report, names, path):
    """Per-attribute balanced accuracy bars plus the summary metrics."""
    counts = report.counts.astype(np.float64)
    balanced = 0.5 * (
        counts[:, 0] / np.maximum(counts[:, 0] + counts[:, 3], 1)
        + counts[:, 1] / np.maximum(counts[:, 1] + counts[:, 2], 1)
    )
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(names)), 3.6), dpi=_DPI)
    ax.bar(range(len(names)), balanced, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("balanced accuracy")
    ax.set_title(f"mA={report.ma:.3f}  F1={report.f1:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_heatmap_figure(image, heat, centroids, path, title=""):
    """Grayscale image with the possibility map overlaid and candidate
    centers marked; ``centroids`` may be None or empty."""
    gray = np.asarray(image).mean(axis=0)
    fig, ax = plt.subplots(figsize=(3.2, 5.4), dpi=_DPI)
    ax.imshow(gray, cmap="gray", vmin=0.0, vmax=1.0)
    peak = float(np.max(heat))
    ax.imshow(heat / peak if peak > 0 else heat, cmap="inferno", alpha=0.55, vmin=0.0, vmax=1.0)
    if centroids is not None and len(centroids):
        pts = np.asarray(centroids)
        ax.scatter(pts[:, 1], pts[:, 0], marker="x", s=60, color="cyan", linewidths=2)
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
