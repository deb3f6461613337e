"""Headless rendering of evaluation artifacts: the ASR/perceptual-distance
sweep chart and attention-map overlays. Pure functions of previously emitted
metric files; no model access."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import ValidationError

# fixed label-map palette for mask visualizations (background..mouth)
MASK_PALETTE = np.array(
    [
        [40, 40, 48],
        [224, 172, 138],
        [88, 60, 40],
        [70, 130, 200],
        [30, 30, 30],
        [200, 70, 90],
    ],
    dtype=np.uint8,
)


def colorize_mask(labels: np.ndarray) -> np.ndarray:
    if labels.max() >= len(MASK_PALETTE):
        raise ValidationError(
            f"label {labels.max()} has no palette entry (palette has {len(MASK_PALETTE)})"
        )
    return MASK_PALETTE[labels]


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValidationError(f"sweep csv {path} is empty")
    return rows


def sweep_chart(rows: list[dict], out_path: str | Path):
    """Bar/line chart of ASR and perceptual distance per swap set (SVG)."""
    labels = [r["swap_set"] for r in rows]
    asr = [float(r["asr"]) * 100.0 for r in rows]
    lpips = [float(r["perceptual_distance"]) for r in rows]

    fig, ax1 = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(labels))
    ax1.bar(xs, asr, width=0.55, color="#4878cf", label="ASR (%)")
    ax1.set_ylabel("Attack success rate (%)")
    ax1.set_ylim(0, 105)
    ax1.set_xticks(xs, labels, rotation=20)
    ax2 = ax1.twinx()
    ax2.plot(xs, lpips, "o-", color="#d1495b", label="perceptual distance")
    ax2.set_ylabel("Perceptual distance")
    handles1, labels1 = ax1.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax1.legend(handles1 + handles2, labels1 + labels2, loc="upper left")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def attention_overlay(base_image: np.ndarray, heatmap: np.ndarray, out_path: str | Path):
    """Overlay a non-negative heatmap on an (H, W, 3) uint8 image."""
    if heatmap.shape != base_image.shape[:2]:
        raise ValidationError(
            f"heatmap shape {heatmap.shape} != image shape {base_image.shape[:2]}"
        )
    heat = heatmap - heatmap.min()
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    cmap = plt.get_cmap("inferno")
    colored = (cmap(heat)[..., :3] * 255).astype(np.uint8)
    blended = (0.55 * base_image + 0.45 * colored).astype(np.uint8)
    Image.fromarray(blended).save(out_path)


def save_image_grid(images: list[np.ndarray], titles: list[str], out_path: str | Path):
    fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 2.6))
    if len(images) == 1:
        axes = [axes]
    for ax, img, title in zip(axes, images, titles):
        ax.imshow(img)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
