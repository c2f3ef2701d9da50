"""Static figure emission: template banks, segmentation overlays, hierarchy
panels, and reconstructions."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from hpcap.config import TrainConfig
from hpcap.subpart import reconstruct
from hpcap.training import PartDiscoveryModel, images_tensor

_PART_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.90, 0.10, 0.29],
        [0.24, 0.71, 0.29],
        [1.00, 0.88, 0.10],
        [0.00, 0.51, 0.78],
        [0.96, 0.51, 0.19],
        [0.57, 0.12, 0.71],
        [0.27, 0.94, 0.94],
    ]
)


def _to_img(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W) or (H, W, 3) in [0, 1]."""
    arr = ((x.detach().numpy() + 1.0) / 2.0).clip(0, 1)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def _label_rgb(labels: np.ndarray) -> np.ndarray:
    colors = _PART_COLORS
    idx = np.clip(labels, 0, len(colors) - 1)
    return colors[idx]


def save_template_grid(model: PartDiscoveryModel, path) -> Path:
    """One tile per subpart: template modulated by its visibility map."""
    with torch.no_grad():
        t = model.autoencoder.templates().numpy()
        v = model.autoencoder.visibilities().numpy()
    k = t.shape[0]
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows))
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.axis("off")
        if i < k:
            ax.imshow(((t[i] + 1) / 2) * v[i], cmap="gray", vmin=0, vmax=1)
            ax.set_title(str(i), fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_segmentation_overlays(
    samples, segmentations, path, max_samples: int = 8
) -> Path:
    """Input image with its color-coded part labels next to it."""
    n = min(len(samples), max_samples)
    fig, axes = plt.subplots(n, 2, figsize=(3.2, 1.6 * n), squeeze=False)
    for i in range(n):
        img = (samples[i].image[0] + 1) / 2
        axes[i][0].imshow(img, cmap="gray", vmin=0, vmax=1)
        overlay = 0.5 * img[:, :, None] + 0.5 * _label_rgb(segmentations[i])
        axes[i][1].imshow(overlay)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_reconstructions(
    model: PartDiscoveryModel, samples, config: TrainConfig, path,
    max_samples: int = 8,
) -> Path:
    """Side-by-side input and mixture reconstruction."""
    n = min(len(samples), max_samples)
    with torch.no_grad():
        capsules = model.autoencoder(images_tensor(samples[:n]))
        recon = reconstruct(capsules)
    fig, axes = plt.subplots(n, 2, figsize=(3.2, 1.6 * n), squeeze=False)
    for i in range(n):
        axes[i][0].imshow((samples[i].image[0] + 1) / 2, cmap="gray", vmin=0, vmax=1)
        axes[i][1].imshow(_to_img(recon[i]), cmap="gray", vmin=0, vmax=1)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_hierarchy_panels(
    model: PartDiscoveryModel, samples, config: TrainConfig, out_dir,
    max_samples: int = 4,
) -> list[Path]:
    """Per sample: input, reconstruction, each part's visibility, and the
    activated subparts grouped under their dominant part."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(len(samples), max_samples)
    with torch.no_grad():
        capsules = model.autoencoder(images_tensor(samples[:n]))
        parts = model.parser(capsules)
        recon = reconstruct(capsules)
    m = config.num_parts
    paths = []
    for i in range(n):
        owner = parts.relationships[i].argmax(dim=0)  # (K,) part per subpart
        fig, axes = plt.subplots(2, max(m, 2) + 1, figsize=(1.6 * (m + 1), 3.4))
        axes[0][0].imshow((samples[i].image[0] + 1) / 2, cmap="gray", vmin=0, vmax=1)
        axes[0][0].set_title("input", fontsize=7)
        axes[1][0].imshow(_to_img(recon[i]), cmap="gray", vmin=0, vmax=1)
        axes[1][0].set_title("recon", fontsize=7)
        for pm in range(m):
            vis = parts.part_visibilities[i, pm].numpy()
            axes[0][pm + 1].imshow(vis, cmap="magma")
            axes[0][pm + 1].set_title(f"part {pm + 1}", fontsize=7)
            members = [
                k for k in range(config.num_subparts)
                if int(owner[k]) == pm and float(capsules.presence[i, k]) > 0.3
            ]
            combo = np.zeros_like(vis)
            for k in members:
                combo = np.maximum(combo, capsules.warped_visibilities[i, k].numpy())
            axes[1][pm + 1].imshow(combo, cmap="magma")
            axes[1][pm + 1].set_title(f"{len(members)} subparts", fontsize=7)
        for ax in axes.ravel():
            ax.axis("off")
        fig.tight_layout()
        path = out_dir / f"hierarchy_{i:03d}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
