"""Accuracy/loss-per-epoch curves and ROC plots as static PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_KEYS = {"acc": ("train_acc", "val_acc", "Accuracy"), "loss": ("train_loss", "val_loss", "Loss")}


def _save(fig, path: Path, config_hash: str) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None, "config_hash": config_hash})
    plt.close(fig)
    return path


def plot_history(streams: dict[str, dict], which: str, path: str | Path, config_hash: str) -> Path:
    """One train and one validation curve per stream, against epoch number."""
    train_key, val_key, label = _KEYS[which]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, h in streams.items():
        epochs = range(1, len(h[train_key]) + 1)
        line = ax.plot(epochs, h[train_key], label=f"{name} train")[0]
        if h[val_key]:
            ax.plot(epochs, h[val_key], "--", color=line.get_color(), label=f"{name} validation")
    ax.set_xlabel("Epoch")
    ax.set_ylabel(label)
    ax.set_title(f"{label}-Epoch curve")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    return _save(fig, Path(path), config_hash)


def plot_roc(curves: dict[str, tuple[list, float]], path: str | Path, config_hash: str) -> Path:
    """ROC curve per stream, ``curves[name] = (points, auc)`` with points ``(fpr, tpr, threshold)``."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, (points, auc) in curves.items():
        ax.plot([p[0] for p in points], [p[1] for p in points], label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title("ROC curve")
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, Path(path), config_hash)
