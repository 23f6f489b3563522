"""Report figures written next to the tab-separated outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_curves(history, path) -> Path:
    """Train loss (left axis) and dev macro-F1 (right axis) per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h.epoch for h in history]
        ax.plot(epochs, [h.train_loss for h in history], color="tab:blue", marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean train loss", color="tab:blue")
        f1 = [h.dev_macro_f1 for h in history]
        if not np.all(np.isnan(f1)):
            ax2 = ax.twinx()
            ax2.plot(epochs, f1, color="tab:orange", marker="s", ms=3)
            ax2.set_ylabel("dev macro-F1", color="tab:orange")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(confusion, class_names: Sequence[str], path) -> Path:
    cm = np.asarray(confusion, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4.0))
        im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ticks = np.arange(len(class_names))
        ax.set_xticks(ticks, class_names, rotation=45, ha="right")
        ax.set_yticks(ticks, class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, f"{int(cm[i, j])}", ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, label="row-normalised")
        fig.tight_layout()
        return _save(fig, path)


def plot_bootstrap(replicates: Sequence[float], full_f1: float, path) -> Path:
    """Histogram of per-replicate macro-F1 with the mean and full-set macro-F1 marked."""
    reps = np.asarray(replicates, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(reps, bins=min(20, max(5, reps.size // 5)), color="0.7", edgecolor="0.3")
        ax.axvline(reps.mean(), color="tab:red", label=f"BS-F1 {reps.mean():.3f}")
        ax.axvline(full_f1, color="tab:blue", ls="--", label=f"full-set F1 {full_f1:.3f}")
        ax.axvspan(reps.min(), reps.max(), color="tab:red", alpha=0.08)
        ax.set_xlabel("macro-F1 of balanced subset")
        ax.set_ylabel("replicates")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
