"""Synthetic RGB-T scenes for smoke tests and overfitting checks.

Each scene holds one or two ellipses. The RGB image shows them in a distinct
colour over a textured background; the thermal image shows them warm over a
cool, smooth background.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def random_blob_mask(rng: np.random.Generator, h: int, w: int, n_max: int = 2) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, n_max + 1))):
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        ry, rx = rng.uniform(0.1, 0.25) * h, rng.uniform(0.1, 0.25) * w
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def make_scene(rng: np.random.Generator, size: int = 96):
    mask = random_blob_mask(rng, size, size)
    m = mask[..., None].astype(np.float32)
    background = rng.uniform(0.2, 0.6, size=3) + 0.15 * rng.standard_normal((size, size, 3))
    colour = rng.uniform(0.0, 1.0, size=3)
    rgb = np.clip(background * (1 - m) + (colour + 0.05 * rng.standard_normal((size, size, 3))) * m, 0, 1)
    cool = 0.2 + 0.05 * rng.standard_normal((size, size))
    warm = 0.8 + 0.05 * rng.standard_normal((size, size))
    thermal = np.clip(np.where(mask, warm, cool), 0, 1)
    return (rgb * 255).astype(np.uint8), (thermal * 255).astype(np.uint8), mask


def write_dataset(root, n: int, size: int = 96, seed: int = 0) -> Path:
    """Write ``n`` scenes under ``root`` in the RGB/T/GT layout and return ``root``."""
    root = Path(root)
    for sub in ("RGB", "T", "GT"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        rgb, thermal, mask = make_scene(rng, size)
        name = f"{i:04d}"
        Image.fromarray(rgb).save(root / "RGB" / f"{name}.jpg", quality=95)
        Image.fromarray(thermal).save(root / "T" / f"{name}.jpg", quality=95)
        Image.fromarray(mask.astype(np.uint8) * 255).save(root / "GT" / f"{name}.png")
    return root
