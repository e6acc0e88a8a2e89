"""Figure rendering for run reports.

Each function writes one PNG next to the CSV/JSON it visualizes. The CSV
files stay the source of truth; figures are convenience output.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "font.size": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

# drop the version string so reruns produce identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(history, path):
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        ax1.plot(epochs, [r.train_loss for r in history], label="train")
        ax1.plot(epochs, [r.val_loss for r in history], label="validation")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("cross-entropy")
        ax1.legend()
        ax2.plot(epochs, [1.0 - r.val_acc for r in history], color="C3")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation error")
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(cm: np.ndarray, class_names: Sequence[str], path, title: str = "Confusion matrix"):
    cm = np.asarray(cm)
    k = len(class_names)
    with plt.rc_context(STYLE):
        size = max(3.0, 0.45 * k + 1.5)
        fig, ax = plt.subplots(figsize=(size, size))
        ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(k), class_names, rotation=45, ha="right")
        ax.set_yticks(range(k), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        errors = int(cm.sum() - np.trace(cm))
        ax.set_title(f"{title} ({errors} errors)")
        thresh = cm.max() / 2 if cm.size else 0
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if cm[i, j] > thresh else "black")
        return _save(fig, path)


def plot_temporal_attention(window: np.ndarray, layers: Sequence[tuple[str, np.ndarray]], path, segment=None):
    """Raw window (H x W) above one heat strip per layer (weights H' x W')."""
    h, w = window.shape
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(layers) + 1, 1, figsize=(7, 1.6 * (len(layers) + 1)), sharex=True)
        axes = np.atleast_1d(axes)
        for i in range(h):
            axes[0].plot(np.arange(w), window[i], label=f"axis {i}")
        if segment is not None:
            axes[0].axvspan(segment[0], segment[1], color="0.85", zorder=0)
        axes[0].set_ylabel("signal")
        axes[0].legend(loc="upper right", ncol=min(h, 4))
        for ax, (name, weights) in zip(axes[1:], layers):
            ax.imshow(weights, aspect="auto", cmap="viridis", vmin=0, vmax=1, extent=(0, w, weights.shape[0], 0),
                      interpolation="nearest")
            ax.set_ylabel(name)
        axes[-1].set_xlabel("time step")
        fig.tight_layout()
        return _save(fig, path)


def plot_channel_attention(layers: Sequence[tuple[str, np.ndarray]], path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(layers), 1, figsize=(7, 1.6 * len(layers)))
        axes = np.atleast_1d(axes)
        for ax, (name, weights) in zip(axes, layers):
            ax.bar(np.arange(len(weights)), weights, width=0.9, color="C0")
            ax.set_ylim(0, 1)
            ax.set_ylabel(name)
        axes[-1].set_xlabel("channel")
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(summary: Sequence[dict], path):
    names = [r["variant"] for r in summary]
    final = [100 * r["final_acc"] for r in summary]
    best = [100 * r["best_acc"] for r in summary]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(x - 0.2, final, 0.4, label="final")
        ax.bar(x + 0.2, best, 0.4, label="best-val")
        ax.set_xticks(x, names, rotation=20, ha="right")
        ax.set_ylabel("test accuracy (%)")
        finite = [v for v in final + best if np.isfinite(v)]
        if finite:
            ax.set_ylim(max(0.0, min(finite) - 5), 100.5)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)
