"""Cross-modal attention interaction between the RGB and thermal pyramids.

Every backbone level (2..5) is squeezed to 64 channels, then a per-level
:class:`AttentionInteraction` builds the attention maps that are added back to
the squeezed features to give the low-level interaction features ``LF``.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import DimensionMismatchError

MODALITIES = ("rgb", "t")
ATTENTION_MODES = ("mcnet", "share", "cross", "noninteraction")


def conv_bn_relu(cin: int, cout: int, k: int = 3, dilation: int = 1) -> nn.Sequential:
    pad = dilation * (k - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Squeeze(nn.Sequential):
    def __init__(self, cin: int, cout: int = 64):
        super().__init__(conv_bn_relu(cin, cout, 3), conv_bn_relu(cout, cout, 1))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        mx = torch.amax(x, dim=(2, 3), keepdim=True)
        avg = torch.mean(x, dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.mlp(mx) + self.mlp(avg))

    def forward(self, x):
        return self.gate(x) * x


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        mx = torch.amax(x, dim=1, keepdim=True)
        avg = torch.mean(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([mx, avg], dim=1)))

    def forward(self, x):
        return self.gate(x) * x


class AttentionInteraction(nn.Module):
    """One level of the interaction module.

    ``mode`` selects the full model ("mcnet") or one of the ablation variants:
    "share" runs channel then spatial attention on the shared feature,
    "cross" runs per-modality attention and cross-adds the maps,
    "noninteraction" runs per-modality attention and adds each map to its own stream.
    """

    def __init__(self, channels: int = 64, reduction: int = 16, mode: str = "mcnet"):
        super().__init__()
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        c = channels
        if mode in ("mcnet", "share"):
            self.hat = nn.ModuleDict({m: conv_bn_relu(c, c, 3) for m in MODALITIES})
            self.ca = ChannelAttention(3 * c, reduction)
            self.shared = nn.ModuleDict({m: conv_bn_relu(3 * c, c, 3) for m in MODALITIES})
        if mode == "mcnet":
            # sa["t"] reads thermal features and guides the RGB stream, and vice versa
            self.sa = nn.ModuleDict({m: SpatialAttention(7) for m in MODALITIES})
        elif mode == "share":
            self.sa_shared = SpatialAttention(7)
        else:
            self.ca = nn.ModuleDict({m: ChannelAttention(c, reduction) for m in MODALITIES})
            self.sa = nn.ModuleDict({m: SpatialAttention(7) for m in MODALITIES})

    def shared_feature(self, f_rgb: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        h_rgb, h_t = self.hat["rgb"](f_rgb), self.hat["t"](f_t)
        return torch.cat([h_rgb * h_t, h_rgb, h_t], dim=1)

    def forward(self, f_rgb: torch.Tensor, f_t: torch.Tensor):
        """Returns ``(lf_rgb, lf_t, parts)``; ``parts`` holds the attention terms by name."""
        if f_rgb.shape != f_t.shape:
            raise DimensionMismatchError(f"modality shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_t.shape)}")
        parts = {}
        if self.mode == "mcnet":
            fuse = self.shared_feature(f_rgb, f_t)
            c_att = self.ca(fuse)
            parts["s_rgb"] = self.sa["t"](f_t)
            parts["s_t"] = self.sa["rgb"](f_rgb)
            parts["shared_rgb"] = self.shared["rgb"](c_att)
            parts["shared_t"] = self.shared["t"](c_att)
            att_rgb = parts["s_rgb"] + parts["shared_rgb"]
            att_t = parts["s_t"] + parts["shared_t"]
        elif self.mode == "share":
            x = self.sa_shared(self.ca(self.shared_feature(f_rgb, f_t)))
            att_rgb, att_t = self.shared["rgb"](x), self.shared["t"](x)
        else:
            own_rgb = self.sa["rgb"](self.ca["rgb"](f_rgb))
            own_t = self.sa["t"](self.ca["t"](f_t))
            if self.mode == "cross":
                att_rgb, att_t = own_t, own_rgb
            else:
                att_rgb, att_t = own_rgb, own_t
        parts["att_rgb"], parts["att_t"] = att_rgb, att_t
        return f_rgb + att_rgb, f_t + att_t, parts


class InteractionModule(nn.Module):
    """Squeeze + attention interaction for levels 2..5 of both pyramids."""

    def __init__(self, in_channels, channels: int = 64, reduction: int = 16, mode: str = "mcnet"):
        super().__init__()
        self.squeeze = nn.ModuleDict({
            m: nn.ModuleList(Squeeze(cin, channels) for cin in in_channels) for m in MODALITIES
        })
        self.levels = nn.ModuleList(
            AttentionInteraction(channels, reduction, mode) for _ in in_channels
        )

    def forward(self, sf_rgb, sf_t) -> dict:
        """``sf_*`` are the four backbone levels SF2..SF5. Returns lists keyed F/LF/Att per modality."""
        if len(sf_rgb) != len(self.levels) or len(sf_t) != len(self.levels):
            raise DimensionMismatchError(f"expected {len(self.levels)} levels")
        out = {k: [] for k in ("F_rgb", "F_t", "LF_rgb", "LF_t", "Att_rgb", "Att_t")}
        for i, level in enumerate(self.levels):
            f_rgb = self.squeeze["rgb"][i](sf_rgb[i])
            f_t = self.squeeze["t"][i](sf_t[i])
            lf_rgb, lf_t, parts = level(f_rgb, f_t)
            out["F_rgb"].append(f_rgb)
            out["F_t"].append(f_t)
            out["LF_rgb"].append(lf_rgb)
            out["LF_t"].append(lf_t)
            out["Att_rgb"].append(parts["att_rgb"])
            out["Att_t"].append(parts["att_t"])
        return out
