"""RGB-T dataset layout, loading, paired augmentation and batching.

Expected layout::

    <root>/RGB/<name>.jpg|png
    <root>/T/<name>.jpg|png
    <root>/GT/<name>.png
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError
from .labels import IMAGE_EXTENSIONS, decouple

_logger = logging.getLogger(__name__)

# ImageNet statistics, applied to both modalities
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

SUBDIRS = ("RGB", "T", "GT")


@dataclass(frozen=True)
class Entry:
    rgb: Path
    thermal: Path
    gt: Path
    name: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    split: str = "train"
    orphans: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def names(self):
        return [e.name for e in self.entries]


@dataclass
class RgbtPair:
    """Images are float32 (3, H, W) in [0, 1]; masks are (H, W)."""
    rgb: np.ndarray
    thermal: np.ndarray
    gt: np.ndarray
    skeleton: np.ndarray
    contour: np.ndarray
    name: str


def _index(d: Path) -> dict:
    out = {}
    for p in sorted(d.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            out.setdefault(p.stem, p)
    return out


def scan_dataset(root: str | os.PathLike, split: str = "train") -> DatasetManifest:
    root = Path(root)
    dirs = {}
    for sub in SUBDIRS:
        d = root / sub
        if not d.is_dir():
            raise DataError(f"missing subdirectory {d}")
        dirs[sub] = _index(d)
    names = set(dirs["RGB"]) & set(dirs["T"]) & set(dirs["GT"])
    orphans = sorted((set(dirs["RGB"]) | set(dirs["T"]) | set(dirs["GT"])) - names)
    if orphans:
        _logger.warning("%d unmatched basenames under %s: %s", len(orphans), root, orphans[:10])
    entries = [Entry(dirs["RGB"][n], dirs["T"][n], dirs["GT"][n], n) for n in sorted(names)]
    return DatasetManifest(root, entries, split, orphans)


def _read(path: Path, mode: str, size: Optional[int], resample) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if size is not None:
                im = im.resize((size, size), resample)
            return np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_pair(entry: Entry, size: Optional[int] = 384) -> RgbtPair:
    """Bilinear resize of both images, nearest resize of gt then binarize at 128.

    Thermal images are read as RGB, which replicates single-channel files to
    three channels. Pixel values stay in [0, 1]; see :func:`normalize`.
    """
    rgb = _read(entry.rgb, "RGB", size, Image.BILINEAR).astype(np.float32) / 255.0
    thermal = _read(entry.thermal, "RGB", size, Image.BILINEAR).astype(np.float32) / 255.0
    gt = _read(entry.gt, "L", size, Image.NEAREST) >= 128
    if rgb.shape != thermal.shape or rgb.shape[:2] != gt.shape:
        raise DataError(f"{entry.name}: modality sizes differ {rgb.shape} {thermal.shape} {gt.shape}")
    labels = decouple(gt)
    return RgbtPair(rgb.transpose(2, 0, 1).copy(), thermal.transpose(2, 0, 1).copy(),
                    labels.gt.astype(np.float32), labels.skeleton.astype(np.float32),
                    labels.contour.astype(np.float32), entry.name)


def normalize(images: np.ndarray | torch.Tensor):
    """Channel-wise mean/std normalization of (..., 3, H, W) images in [0, 1]."""
    if isinstance(images, torch.Tensor):
        mean = torch.as_tensor(MEAN, dtype=images.dtype).view(3, 1, 1)
        std = torch.as_tensor(STD, dtype=images.dtype).view(3, 1, 1)
        return (images - mean) / std
    return (images - MEAN[:, None, None]) / STD[:, None, None]


@dataclass(frozen=True)
class GeometricTransform:
    """Horizontal flip, then ``rot90`` by ``k`` quarter turns, then crop (top, bottom, left, right) and resize back."""
    flip: bool = False
    k: int = 0
    crop: tuple = (0, 0, 0, 0)


def sample_transform(rng: np.random.Generator, h: int, w: int, max_crop: float = 0.1) -> GeometricTransform:
    flip = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    hh, ww = (w, h) if k % 2 else (h, w)
    limits = (int(max_crop * hh),) * 2 + (int(max_crop * ww),) * 2
    crop = tuple(int(rng.integers(0, lim + 1)) for lim in limits)
    return GeometricTransform(flip, k, crop)


def _resize(arr: np.ndarray, size, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    squeeze = t.dim() == 2
    t = t[None, None] if squeeze else t[None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    t = F.interpolate(t, size=tuple(size), mode=mode, **kwargs)
    return (t[0, 0] if squeeze else t[0]).numpy()


def apply_transform(arr: np.ndarray, tf: GeometricTransform, mode: str = "bilinear") -> np.ndarray:
    """Apply to an (H, W) or (C, H, W) array; output size equals input size when rotation keeps shape."""
    if tf.flip:
        arr = arr[..., :, ::-1]
    if tf.k:
        arr = np.rot90(arr, tf.k, axes=(-2, -1))
    h, w = arr.shape[-2:]
    top, bottom, left, right = tf.crop
    if any(tf.crop):
        arr = arr[..., top:h - bottom, left:w - right]
        arr = _resize(arr, (h, w), mode)
    return np.ascontiguousarray(arr)


def transform_point(tf: GeometricTransform, y: float, x: float, h: int, w: int):
    """Where pixel centre (y, x) of an (h, w) image lands after ``tf``, in continuous pixel coordinates."""
    if tf.flip:
        x = w - 1 - x
    for _ in range(tf.k):
        # np.rot90 counter-clockwise: (y, x) -> (w - 1 - x, y), shape (h, w) -> (w, h)
        y, x, h, w = w - 1 - x, y, w, h
    top, bottom, left, right = tf.crop
    if any(tf.crop):
        sy = h / (h - top - bottom)
        sx = w / (w - left - right)
        y = (y - top + 0.5) * sy - 0.5
        x = (x - left + 0.5) * sx - 0.5
    return y, x


def augment(pair: RgbtPair, seed: int, crop: bool = True, tf: GeometricTransform | None = None) -> RgbtPair:
    """Same random flip/rotation/border crop on every array; skeleton and contour are recomputed."""
    h, w = pair.gt.shape
    if tf is None:
        tf = sample_transform(np.random.default_rng(seed), h, w, 0.1 if crop else 0.0)
    rgb = apply_transform(pair.rgb, tf, "bilinear")
    thermal = apply_transform(pair.thermal, tf, "bilinear")
    gt = apply_transform(pair.gt, tf, "nearest") >= 0.5
    labels = decouple(gt)
    return replace(pair, rgb=rgb, thermal=thermal, gt=labels.gt.astype(np.float32),
                   skeleton=labels.skeleton.astype(np.float32),
                   contour=labels.contour.astype(np.float32))


def num_workers(default: int = 4) -> int:
    cap = os.environ.get("MCNET_NUM_WORKERS")
    n = min(default, os.cpu_count() or 1)
    if cap:
        n = min(n, max(int(cap), 1))
    return max(n, 1)


def collate(pairs: list[RgbtPair]) -> dict:
    return {
        "rgb": normalize(torch.from_numpy(np.stack([p.rgb for p in pairs]))),
        "thermal": normalize(torch.from_numpy(np.stack([p.thermal for p in pairs]))),
        "gt": torch.from_numpy(np.stack([p.gt for p in pairs]))[:, None],
        "skeleton": torch.from_numpy(np.stack([p.skeleton for p in pairs]))[:, None],
        "contour": torch.from_numpy(np.stack([p.contour for p in pairs]))[:, None],
        "names": [p.name for p in pairs],
    }


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(manifest: DatasetManifest, batch_size: int, shuffle: bool = False, seed: int = 0,
                   size: Optional[int] = 384, train: bool = False, epoch: int = 0,
                   start_batch: int = 0, cache: dict | None = None) -> Iterator[dict]:
    """Yield collated batches in a seed-determined order; the last partial batch is kept.

    With ``train`` set, each sample is augmented with a seed derived from
    (seed, epoch, sample index), so results do not depend on worker scheduling.
    ``cache`` (a dict) memoizes decoded pairs across epochs.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not manifest.entries:
        raise DataError(f"empty manifest for {manifest.root}")
    order = epoch_order(len(manifest.entries), shuffle, seed, epoch)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    def prepare(idx: int) -> RgbtPair:
        entry = manifest.entries[idx]
        if cache is not None and entry.name in cache:
            pair = cache[entry.name]
        else:
            pair = load_pair(entry, size)
            if cache is not None:
                cache[entry.name] = pair
        if train:
            pair = augment(pair, seed=int(np.random.SeedSequence([seed, epoch, int(idx)]).generate_state(1)[0]))
        return pair

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        for b in batches[start_batch:]:
            yield collate(list(pool.map(prepare, b)))
