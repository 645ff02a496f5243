"""Split a binary saliency mask into a skeleton map and a contour map.

The skeleton is the Euclidean distance to the background, normalized to a peak
of 1; the contour is what remains of the mask once the skeleton is removed.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

_logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class DecoupledLabels:
    gt: np.ndarray
    skeleton: np.ndarray
    contour: np.ndarray


def _as_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError("mask must be binary (values in {0, 1})")
    return mask.astype(bool)


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel.

    Pixels outside the image count as background, so a lone foreground pixel
    gets distance 1.
    """
    fg = np.pad(_as_binary(mask), 1, constant_values=False)
    return ndimage.distance_transform_edt(fg)[1:-1, 1:-1]


def decouple(gt: np.ndarray, per_component: bool = False) -> DecoupledLabels:
    """Normalization is global unless ``per_component`` is set, in which case each
    8-connected object is scaled by its own maximum distance."""
    fg = _as_binary(gt)
    dist = distance_transform(fg)
    skeleton = np.zeros(fg.shape, dtype=np.float64)
    if per_component:
        labels, n = ndimage.label(fg, structure=np.ones((3, 3)))
        if n:
            peaks = ndimage.maximum(dist, labels, index=np.arange(1, n + 1))
            scale = np.concatenate([[1.0], peaks])[labels]
            skeleton = np.where(fg, dist / scale, 0.0)
    elif dist.max() > 0:
        skeleton = dist / dist.max()
    gt_f = fg.astype(np.float64)
    return DecoupledLabels(gt=gt_f, skeleton=skeleton, contour=gt_f - skeleton)


def read_mask(path: str | os.PathLike, threshold: int = 128) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return arr >= threshold


def to_uint8(v: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * np.asarray(v, dtype=np.float64)), 0, 255).astype(np.uint8)


def decouple_directory(gt_dir: str | os.PathLike, out_dir: str | os.PathLike,
                       skipped: list | None = None, per_component: bool = False) -> int:
    """Write ``<name>_skeleton.png`` and ``<name>_contour.png`` for every mask in ``gt_dir``.

    Returns the number of masks processed. Unreadable files are logged and,
    when ``skipped`` is given, appended to it.
    """
    gt_dir, out_dir = Path(gt_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
        try:
            mask = read_mask(path)
        except DataError as exc:
            _logger.warning("skipping %s", exc)
            if skipped is not None:
                skipped.append(path.name)
            continue
        labels = decouple(mask, per_component=per_component)
        Image.fromarray(to_uint8(labels.skeleton)).save(out_dir / f"{path.stem}_skeleton.png")
        Image.fromarray(to_uint8(labels.contour)).save(out_dir / f"{path.stem}_contour.png")
        count += 1
    return count
