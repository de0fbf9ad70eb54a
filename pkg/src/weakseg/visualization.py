"""
visualization.py

Figures for the experiments:
 - training curves with vs. without knowledge-informed label smoothing
 - cross-validated Pearson correlation against the number of selected
   clinical features
 - a slice overlay of a segmentation
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoError  # noqa: E402

logger = logging.getLogger(__name__)


def ensure_folder(folder):
    """Ensure that the output folder exists and return it as a Path."""
    folder = Path(folder)
    try:
        folder.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {folder}: {exc}") from exc
    return folder


def _save(fig, path):
    path = Path(path)
    ensure_folder(path.parent)
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    logger.info("saved figure %s", path)
    return path


def plot_training_curves(runs, path, title="Training with vs. without label smoothing"):
    """
    Training loss and validation Dice per epoch for several runs.

    Args:
        runs (dict): legend label -> TrainingCurves.
        path: PNG destination.
    """
    fig, (loss_ax, dice_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for label, curves in runs.items():
        epochs = np.arange(1, len(curves) + 1)
        loss_ax.plot(epochs, curves.total, label=label)
        dice_ax.plot(epochs, curves.val_dice, label=label)
    loss_ax.set_xlabel("epoch")
    loss_ax.set_ylabel("training loss")
    dice_ax.set_xlabel("epoch")
    dice_ax.set_ylabel("validation Dice")
    dice_ax.set_ylim(0.0, 1.0)
    loss_ax.legend()
    fig.suptitle(title)
    return _save(fig, path)


def plot_selection_curve(report, path):
    """Cross-validated Pearson against the number of top-ranked features."""
    n, r = zip(*report.curve) if report.curve else ((), ())
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(n, r, "o-", color="tab:blue")
    ax.axvline(report.best_n, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("number of features")
    ax.set_ylabel("cross-validated Pearson")
    ax.set_title(f"Feature selection (best n = {report.best_n}, r = {report.best_pearson:.3f})")
    return _save(fig, path)


def plot_overlay(volume, liver, tumor, path, z=None):
    """Axial slice of the image with liver and tumor contours."""
    if z is None:
        counts = tumor.foreground().sum(axis=(0, 1))
        z = int(np.argmax(counts)) if counts.any() else volume.dims[2] // 2
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(volume.data[:, :, z].T, cmap="gray", origin="lower")
    for mask, color in ((liver, "tab:green"), (tumor, "tab:red")):
        outline = mask.foreground()[:, :, z].T
        if outline.any():
            ax.contour(outline.astype(float), levels=[0.5], colors=color)
    ax.set_title(f"slice z = {z}")
    ax.axis("off")
    return _save(fig, path)
