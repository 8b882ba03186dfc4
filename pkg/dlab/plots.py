from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

POINTS_GID = "latents"


def factor_colors(units: np.ndarray) -> np.ndarray:
    """Red follows the first factor, blue the second."""
    units = np.clip(np.asarray(units, dtype=np.float64), 0.0, 1.0)
    return np.stack([units[:, 0], np.full(len(units), 0.25), units[:, 1]], axis=1)


def plot_latent(reps, units, path, title: str = "", limits=(0.0, 1.0)) -> Path:
    """Scatter 2-D representations, one marker per factor tuple, coloured by the tuple."""
    path = Path(path)
    reps = np.asarray(reps, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 4))
    points = ax.scatter(reps[:, 0], reps[:, 1], c=factor_colors(units), s=18, edgecolors="none")
    points.set_gid(POINTS_GID)
    pad = 0.05 * (limits[1] - limits[0])
    ax.set_xlim(limits[0] - pad, limits[1] + pad)
    ax.set_ylim(limits[0] - pad, limits[1] + pad)
    ax.set_xlabel("r(x)$_1$")
    ax.set_ylabel("r(x)$_2$")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("latent plot -> %s", path)
    return path


def plot_traversal(images, path, row_labels=None) -> Path:
    """Grid of decoded images, shape (rows, cols, H, W, C)."""
    path = Path(path)
    images = np.asarray(images, dtype=np.float64)
    rows, cols = images.shape[:2]
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.8, rows * 0.8), squeeze=False)
    for r in range(rows):
        for c in range(cols):
            img = images[r, c]
            ax = axes[r][c]
            ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
        if row_labels is not None:
            axes[r][0].set_ylabel(row_labels[r], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100)
    plt.close(fig)
    logger.info("traversal plot -> %s", path)
    return path
