"""Mask overlays (PPM) and matplotlib report figures."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import pnm

RED = (255, 0, 0)
BLUE = (0, 0, 255)
PURPLE = (128, 0, 128)


def overlay_rgb(image: np.ndarray, true_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Grayscale base; truth-only pixels red, prediction-only blue, agreement purple."""
    image = np.asarray(image)
    t = np.asarray(true_mask) > 0
    p = np.asarray(pred_mask) > 0
    if not (image.shape == t.shape == p.shape) or image.ndim != 2:
        raise ValueError(f"overlay needs three equal [H,W] arrays, got {image.shape}, {t.shape}, {p.shape}")
    gray = pnm.to_uint8(image)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[t & ~p] = RED
    rgb[p & ~t] = BLUE
    rgb[t & p] = PURPLE
    return rgb


def write_overlay(path, image, true_mask, pred_mask) -> Path:
    path = Path(path)
    pnm.write_ppm(path, overlay_rgb(image, true_mask, pred_mask))
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(path, history: Sequence, title: str = "training loss") -> Path:
    plt = _pyplot()
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax.plot(epochs, [h.mean_loss for h in history], marker="o", label="total")
    ax.plot(epochs, [-h.dice_term for h in history], ls="--", label="-dice")
    if any(h.comp_term for h in history):
        ax.plot(epochs, [h.comp_term for h in history], ls=":", label="comp")
    if any(h.recon_term for h in history):
        ax.plot(epochs, [h.recon_term for h in history], ls="-.", label="recon")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_outputs(path, image: np.ndarray, seg: np.ndarray, comp: np.ndarray | None = None,
                 recon: np.ndarray | None = None) -> Path:
    """Side-by-side panel of the input and whichever network outputs exist."""
    plt = _pyplot()
    panels = [("input", image), ("segmentation", seg)]
    if comp is not None:
        panels.append(("complementary", comp))
    if recon is not None:
        panels.append(("reconstruction", recon))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6), dpi=100)
    for ax, (name, arr) in zip(axes, panels):
        ax.imshow(arr, cmap="gray", vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_dice_comparison(path, results: dict[str, dict[str, float]]) -> Path:
    """Grouped bars: mean Dice per model (outer key) and test set (inner key)."""
    plt = _pyplot()
    models = list(results)
    sets = sorted({k for r in results.values() for k in r})
    width = 0.8 / max(len(sets), 1)
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    for j, s in enumerate(sets):
        xs = np.arange(len(models)) + j * width
        ax.bar(xs, [results[m].get(s, np.nan) for m in models], width, label=s)
    ax.set_xticks(np.arange(len(models)) + width * (len(sets) - 1) / 2, models, fontsize=8)
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0.5, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
