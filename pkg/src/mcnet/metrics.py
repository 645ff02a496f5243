"""Saliency evaluation: MAE, F-measures, weighted F, S-measure, E-measure and PR curves.

Predictions are float maps in [0, 1]; ground truths are binary. Every
function works on a single image; :func:`evaluate_dataset` aggregates.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, DimensionMismatchError
from .labels import IMAGE_EXTENSIONS

_logger = logging.getLogger(__name__)

BETA2 = 0.3
N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0
EPS = np.finfo(np.float64).eps


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for this ground truth (e.g. empty mask)."""


def _prep(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt.astype(bool)


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def adaptive_binarize(pred: np.ndarray) -> np.ndarray:
    """Threshold at twice the mean saliency, capped at 1. A zero threshold keeps only positive pixels."""
    thr = min(2.0 * float(pred.mean()), 1.0)
    return pred >= thr if thr > 0 else pred > 0


def _f_beta(p, r, beta2=BETA2):
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    den = beta2 * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1), 0.0)
    return f


def pr_curve(pred, gt):
    """Precision and recall of ``pred >= t/255`` for t = 0..255.

    Precision is 1 at thresholds where nothing is predicted positive.
    """
    pred, gt = _prep(pred, gt)
    n_fg = int(gt.sum())
    if n_fg == 0:
        raise UndefinedMetricError("recall undefined for empty ground truth")
    # number of thresholds each pixel passes: THRESHOLDS[k] <= p for k < level
    level = np.searchsorted(THRESHOLDS, pred.ravel(), side="right")
    fg = gt.ravel()
    hist_fg = np.bincount(level[fg], minlength=N_THRESHOLDS + 1)
    hist_all = np.bincount(level, minlength=N_THRESHOLDS + 1)
    # pixels with level > t are predicted positive at threshold t
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    pp = np.cumsum(hist_all[::-1])[::-1][1:]
    precision = np.where(pp > 0, tp / np.maximum(pp, 1), 1.0)
    recall = tp / n_fg
    return precision, recall


def f_measures(pred, gt):
    """Returns ``(f_avg, f_max, f_curve)``; f_avg uses the adaptive threshold."""
    pred, gt = _prep(pred, gt)
    precision, recall = pr_curve(pred, gt)
    curve = _f_beta(precision, recall)
    binary = adaptive_binarize(pred)
    tp = float(np.sum(binary & gt))
    pp = float(binary.sum())
    p = tp / pp if pp else 1.0
    r = tp / float(gt.sum())
    return float(_f_beta(p, r)), float(curve.max()), curve


def _matlab_gaussian(size=7, sigma=5.0):
    ax = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    k[k < np.finfo(np.float64).eps * k.max()] = 0
    return k / k.sum()


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    """Weighted F-measure with dependency-aware errors and distance-weighted false positives."""
    pred, gt = _prep(pred, gt)
    if not gt.any():
        raise UndefinedMetricError("weighted F undefined for empty ground truth")
    E = np.abs(pred - gt)
    dist, idx = ndimage.distance_transform_edt(~gt, return_indices=True)
    # background pixels take the error of their nearest foreground pixel
    Et = E.copy()
    bg = ~gt
    Et[bg] = E[idx[0][bg], idx[1][bg]]
    EA = ndimage.convolve(Et, _matlab_gaussian(7, 5.0), mode="constant", cval=0.0)
    min_e = E.copy()
    sel = gt & (EA < E)
    min_e[sel] = EA[sel]
    B = np.ones_like(E)
    B[bg] = 2.0 - np.exp(math.log(0.5) / 5.0 * dist[bg])
    Ew = min_e * B
    tpw = gt.sum() - Ew[gt].sum()
    fpw = Ew[bg].sum()
    R = 1.0 - Ew[gt].mean()
    P = tpw / (EPS + tpw + fpw)
    return float((1 + beta2) * R * P / (EPS + R + beta2 * P))


def _object_score(x: np.ndarray) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    N = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (N - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (N - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (N - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    fg = pred[gt]
    bg = 1.0 - pred[~gt]
    s_object = y * _object_score(fg) + (1 - y) * _object_score(bg)

    # split at the (1-based, rounded half-up) foreground centroid
    h, w = gt.shape
    rows, cols = np.nonzero(gt)
    X = int(math.floor(cols.mean() + 1 + 0.5))
    Y = int(math.floor(rows.mean() + 1 + 0.5))
    area = h * w
    weights = (X * Y / area, (w - X) * Y / area, X * (h - Y) / area)
    weights = weights + (1.0 - sum(weights),)
    quads = ((slice(0, Y), slice(0, X)), (slice(0, Y), slice(X, w)),
             (slice(Y, h), slice(0, X)), (slice(Y, h), slice(X, w)))
    s_region = 0.0
    for wq, (rs, cs) in zip(weights, quads):
        p_q, g_q = pred[rs, cs], gt[rs, cs].astype(np.float64)
        if p_q.size:
            s_region += wq * _region_ssim(p_q, g_q)
    score = alpha * s_object + (1 - alpha) * s_region
    return float(max(score, 0.0))


def e_measure(pred, gt) -> float:
    """Enhanced alignment between the adaptively binarized prediction and gt, averaged over pixels."""
    pred, gt = _prep(pred, gt)
    fm = adaptive_binarize(pred).astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - fm
    elif gt.all():
        enhanced = fm
    else:
        a_fm = fm - fm.mean()
        a_gt = g - g.mean()
        align = 2.0 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


@dataclass
class ImageScores:
    name: str
    mae: float
    s_m: float
    e_m: float
    f_avg: float | None = None
    f_weighted: float | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f_curve: np.ndarray | None = None


def score_image(name: str, pred, gt) -> ImageScores:
    pred, gt = _prep(pred, gt)
    scores = ImageScores(name, mae(pred, gt), s_measure(pred, gt), e_measure(pred, gt))
    if gt.any():
        scores.precision, scores.recall = pr_curve(pred, gt)
        scores.f_avg, _, scores.f_curve = f_measures(pred, gt)
        scores.f_weighted = weighted_f(pred, gt)
    return scores


@dataclass
class MetricsReport:
    f_avg: float
    f_max: float
    f_weighted: float
    mae: float
    e_m: float
    s_m: float
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    n_images: int = 0
    missing: list = field(default_factory=list)
    empty_gt: list = field(default_factory=list)
    resized: list = field(default_factory=list)

    @property
    def pr_curve(self):
        return list(zip(self.precision.tolist(), self.recall.tolist()))

    def row(self) -> dict:
        return {"Favg": self.f_avg, "Fmax": self.f_max, "Fw": self.f_weighted,
                "MAE": self.mae, "Em": self.e_m, "Sm": self.s_m}


def aggregate(scores: list[ImageScores]) -> MetricsReport:
    """Mean of per-image scores in name order; curves averaged pointwise over images with nonempty gt."""
    scores = sorted(scores, key=lambda s: s.name)
    if not scores:
        raise DataError("no images to aggregate")
    valid = [s for s in scores if s.f_curve is not None]

    def mean(values):
        values = list(values)
        return math.fsum(values) / len(values) if values else float("nan")

    if valid:
        precision = np.mean([s.precision for s in valid], axis=0)
        recall = np.mean([s.recall for s in valid], axis=0)
        f_curve = np.mean([s.f_curve for s in valid], axis=0)
    else:
        precision = recall = f_curve = np.full(N_THRESHOLDS, np.nan)
    return MetricsReport(
        f_avg=mean(s.f_avg for s in valid),
        f_max=float(np.max(f_curve)) if valid else float("nan"),
        f_weighted=mean(s.f_weighted for s in valid),
        mae=mean(s.mae for s in scores),
        e_m=mean(s.e_m for s in scores),
        s_m=mean(s.s_m for s in scores),
        precision=precision, recall=recall, f_curve=f_curve,
        n_images=len(scores),
        empty_gt=[s.name for s in scores if s.f_curve is None],
    )


def read_gray(path, size=None) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]; ``size`` (h, w) triggers a bilinear resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _index_dir(d: Path) -> dict:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS}


def evaluate_dataset(pred_dir, gt_dir, names=None) -> MetricsReport:
    """Score every gt image against the prediction with the same basename.

    ``names`` restricts evaluation to a subset (e.g. one challenge attribute).
    Missing predictions are listed and skipped; predictions whose size differs
    from gt are resized to the gt size and listed in ``resized``.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    preds, gts = _index_dir(pred_dir), _index_dir(gt_dir)
    keys = sorted(gts if names is None else set(gts) & set(names))
    missing, resized, scores = [], [], []
    for name in keys:
        if name not in preds:
            missing.append(name)
            continue
        gt = read_gray(gts[name]) >= 128 / 255.0
        with Image.open(preds[name]) as im:
            pred_size = im.size[::-1]
        if tuple(pred_size) != gt.shape:
            resized.append(name)
        pred = read_gray(preds[name], size=gt.shape)
        scores.append(score_image(name, pred, gt))
    if missing:
        _logger.warning("%d gt images without prediction: %s", len(missing), missing[:10])
    report = aggregate(scores)
    report.missing, report.resized = missing, resized
    return report


REPORT_COLUMNS = ("dataset", "method", "Favg", "Fmax", "Fw", "MAE", "Em", "Sm")


def write_report_csv(path, reports: list[tuple[str, str, MetricsReport]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for dataset, method, report in reports:
            row = report.row()
            writer.writerow([dataset, method] + [f"{row[k]:.6f}" for k in REPORT_COLUMNS[2:]])


def write_curve_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("threshold", "precision", "recall", "fmeasure"))
        for t in range(N_THRESHOLDS):
            writer.writerow([t, f"{report.precision[t]:.6f}", f"{report.recall[t]:.6f}",
                             f"{report.f_curve[t]:.6f}"])
