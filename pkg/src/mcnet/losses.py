"""BCE, SSIM and IoU kernels and the three-branch training objective.

All kernels take probability maps shaped (H, W), (1, H, W) or (B, 1, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionMismatchError

BCE_EPS = 1e-7
IOU_EPS = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def _check(pred, target):
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x**2 / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(pred: torch.Tensor, target: torch.Tensor, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Per-pixel SSIM with a normalized Gaussian window and zero padding ("same" size)."""
    x, y = _as_4d(pred), _as_4d(target)
    w = gaussian_window(window, sigma, x.dtype).to(x.device)[None, None].expand(x.shape[1], 1, -1, -1)
    pad = window // 2
    groups = x.shape[1]

    def filt(z):
        return F.conv2d(z, w, padding=pad, groups=groups)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    return 1 - ssim_map(pred, target).mean()


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft IoU, computed per image and averaged over the batch."""
    _check(pred, target)
    p, t = _as_4d(pred), _as_4d(target)
    inter = (p * t).sum(dim=(1, 2, 3))
    union = p.sum(dim=(1, 2, 3)) + t.sum(dim=(1, 2, 3)) - inter
    return (1 - (inter + IOU_EPS) / (union + IOU_EPS)).mean()


def branch_loss(pred: torch.Tensor, soft_target: torch.Tensor) -> torch.Tensor:
    return bce_loss(pred, soft_target) + ssim_loss(pred, soft_target)


def hybrid_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return bce_loss(pred, target) + ssim_loss(pred, target) + iou_loss(pred, target)


@dataclass
class LossBundle:
    l_rgb: torch.Tensor
    l_thermal: torch.Tensor
    l_fusion: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        parts = {k: float(getattr(self, k).detach()) for k in ("l_rgb", "l_thermal", "l_fusion")}
        parts["total"] = parts["l_rgb"] + parts["l_thermal"] + parts["l_fusion"]
        return parts


def total_loss(pred_rgb, pred_t, pred_fusion, gt, skeleton, contour) -> LossBundle:
    """Skeleton supervises the RGB branch, contour the thermal branch, full gt the fusion map."""
    size = pred_fusion.shape[-2:]
    gt, skeleton, contour = (_resize_label(_as_4d(l).to(pred_fusion.dtype), size)
                             for l in (gt, skeleton, contour))
    pred_rgb, pred_t, pred_fusion = _as_4d(pred_rgb), _as_4d(pred_t), _as_4d(pred_fusion)
    l_rgb = branch_loss(pred_rgb, skeleton)
    l_t = branch_loss(pred_t, contour)
    l_f = hybrid_loss(pred_fusion, gt)
    return LossBundle(l_rgb, l_t, l_f, l_rgb + l_t + l_f)


def _resize_label(label: torch.Tensor, size) -> torch.Tensor:
    if label.shape[-2:] == tuple(size):
        return label
    return F.interpolate(label, size=tuple(size), mode="bilinear", align_corners=False)
