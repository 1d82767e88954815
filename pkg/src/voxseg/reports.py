"""Training-curve files and augmentation QC montages.

The CSV is the authoritative artifact; the raster plots are conveniences
rendered from the same series.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import VoxsegError

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice", "seconds")


def write_history_csv(history, path) -> Path:
    """One row per epoch, values written exactly as recorded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
    return path


def render_training_curves(history, out_dir) -> dict:
    """Write history.csv plus loss and metric curve images into ``out_dir``."""
    if not history:
        raise VoxsegError("cannot render curves from an empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": write_history_csv(history, out_dir / "history.csv")}

    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train loss")
    ax.plot(epochs, [row["val_loss"] for row in history], label="validation loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    paths["loss"] = out_dir / "loss_curves.png"
    fig.savefig(paths["loss"])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row["val_dice"] for row in history], label="validation dice")
    ax.set_xlabel("epoch")
    ax.set_ylabel("dice")
    ax.legend()
    fig.tight_layout()
    paths["metric"] = out_dir / "metric_curve.png"
    fig.savefig(paths["metric"])
    plt.close(fig)
    return paths


def _panel(arr: np.ndarray) -> np.ndarray:
    """First channel, middle slice of the last axis for 3D units."""
    img = arr[0]
    if img.ndim == 3:
        img = img[:, :, img.shape[2] // 2]
    return img


def qc_montage(pairs, path) -> Path:
    """Grid of (before, after) augmentation panels, one row per sample.

    ``pairs`` is a list of (before_array, after_array, title) with
    channel-first arrays. Deterministic for fixed inputs.
    """
    if not pairs:
        raise VoxsegError("qc_montage needs at least one sample pair")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(pairs)
    fig, axes = plt.subplots(n, 2, figsize=(6, 3 * n), squeeze=False)
    for row, (before, after, title) in enumerate(pairs):
        for col, (arr, tag) in enumerate(((before, "before"), (after, "after"))):
            ax = axes[row][col]
            ax.imshow(_panel(np.asarray(arr)).T, cmap="gray", origin="lower")
            ax.set_title(f"{title} ({tag})", fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
