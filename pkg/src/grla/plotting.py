"""Report figures and image files.

Everything here must be byte-deterministic across reruns: PNG text chunks
are pinned (no timestamps), layouts are fixed, and pixel data comes from
arrays the caller already controls.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

__all__ = [
    "save_image_png",
    "plot_cross_domain",
    "plot_training_curves",
]

_PNG_META = {"Software": "grla"}


def save_image_png(array, path):
    """Write a float image in [0, 1] — (H, W) or (C, H, W) with C=3 — as 8-bit PNG."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ValueError(f"color image must be (3, H, W), got {a.shape}")
        a = a.transpose(1, 2, 0)
    elif a.ndim != 2:
        raise ValueError(f"image must be (H, W) or (3, H, W), got {a.shape}")
    pixels = (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def plot_cross_domain(matrix, path):
    """Accuracy heatmap of a CrossDomainMatrix, cells annotated."""
    grid = matrix.accuracy_grid()
    rows, cols = matrix.train_domains, matrix.eval_domains
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(cols), 1.0 + 0.9 * len(rows)))
    im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols, rotation=30, ha="right")
    ax.set_yticks(range(len(rows)), rows)
    ax.set_xlabel("evaluated on")
    ax.set_ylabel("trained on")
    for i in range(len(rows)):
        for j in range(len(cols)):
            v = grid[i, j]
            ax.text(j, i, f"{v:.3f}", ha="center", va="center",
                    color="white" if v < 0.6 else "black", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)


def plot_training_curves(records, path):
    """Two-panel figure from manifest epoch records: losses, then λ and lr."""
    if not records:
        raise ValueError("no epoch records to plot")
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(epochs, [r["class_loss"] for r in records], label="class loss")
    ax1.plot(epochs, [r["domain_loss"] for r in records], label="domain loss")
    ax1.plot(epochs, [r["total_loss"] for r in records], label="total", linestyle="--")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["lambda"] for r in records], label="λ")
    ax2.plot(epochs, [r["lr"] for r in records], label="lr")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("schedule value")
    ax2.legend()
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
