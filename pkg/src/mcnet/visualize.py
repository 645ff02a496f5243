"""Image exports: feature-map grids and PR / F-threshold curve plots."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image


def feature_grid(fmap: np.ndarray, n_channels: int = 16, pad: int = 2) -> np.ndarray:
    """Tile the first ``n_channels`` of a (C, H, W) map into a square uint8 grid, each channel min-max scaled."""
    fmap = np.asarray(fmap, dtype=np.float64)[:n_channels]
    c, h, w = fmap.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    for i, ch in enumerate(fmap):
        lo, hi = ch.min(), ch.max()
        scaled = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        r, q = divmod(i, cols)
        grid[r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = np.round(255 * scaled)
    return grid


def save_feature_grid(fmap: np.ndarray, path, n_channels: int = 16) -> None:
    Image.fromarray(feature_grid(fmap, n_channels), mode="L").save(path)


def plot_curves(curves: dict, out_prefix) -> list[Path]:
    """``curves`` maps a method label to a MetricsReport. Writes ``<prefix>_pr.png`` and ``<prefix>_f.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_prefix = Path(out_prefix)
    paths = []
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, report in curves.items():
        ax.plot(report.recall, report.precision, label=label)
    ax.set(xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower left")
    paths.append(out_prefix.with_name(out_prefix.name + "_pr.png"))
    fig.savefig(paths[-1], dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    thresholds = np.arange(256)
    for label, report in curves.items():
        ax.plot(thresholds, report.f_curve, label=label)
    ax.set(xlabel="Threshold", ylabel="F-measure", xlim=(0, 255), ylim=(0, 1.02))
    ax.legend(loc="lower left")
    paths.append(out_prefix.with_name(out_prefix.name + "_f.png"))
    fig.savefig(paths[-1], dpi=120, bbox_inches="tight")
    plt.close(fig)
    return paths
