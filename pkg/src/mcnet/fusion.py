"""Decoders, serial dilated-convolution fusion and the assembled two-stream network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, SwinEncoder, build_backbone, get_preset
from .errors import DimensionMismatchError
from .interaction import MODALITIES, InteractionModule, conv_bn_relu


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class Decoder(nn.Module):
    """Top-down aggregation of four 64-channel levels into a stride-4 map and full-size logits."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.convs = nn.ModuleList(conv_bn_relu(channels, channels, 3) for _ in range(4))
        self.head = nn.Sequential(conv_bn_relu(channels, 16, 3), nn.Conv2d(16, 1, 1))

    def forward(self, feats, out_size=None):
        """``feats`` ordered level 2..5. Returns ``(aggregate, logits)``."""
        if len(feats) != 4:
            raise DimensionMismatchError(f"decoder expects 4 levels, got {len(feats)}")
        x = self.convs[0](feats[3])
        for conv, f in zip(self.convs[1:], (feats[2], feats[1], feats[0])):
            x = conv(upsample_to(x, f.shape[-2:]) + f)
        if out_size is None:
            out_size = (4 * x.shape[-2], 4 * x.shape[-1])
        return x, upsample_to(self.head(x), out_size)


class SDCFusion(nn.Module):
    """Serial chain of (γ×γ conv, 1×1 conv, 3×3 conv dilated by γ) blocks with 2×2 max pooling
    between them. Each block output is split into two 64-channel deep interactive features."""

    def __init__(self, in_channels: int = 128, width: int = 128, out_channels: int = 64,
                 dilations=(1, 3, 5, 7)):
        super().__init__()
        self.dilations = tuple(dilations)
        blocks = []
        cin = in_channels
        for g in self.dilations:
            blocks.append(nn.Sequential(
                conv_bn_relu(cin, width, g),
                conv_bn_relu(width, width, 1),
                conv_bn_relu(width, width, 3, dilation=g),
            ))
            cin = width
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleDict({
            m: nn.ModuleList(conv_bn_relu(width, out_channels, 3) for _ in self.dilations)
            for m in MODALITIES
        })

    def forward(self, agg_rgb: torch.Tensor, agg_t: torch.Tensor) -> dict:
        if agg_rgb.shape != agg_t.shape:
            raise DimensionMismatchError(f"aggregate shapes differ: {tuple(agg_rgb.shape)} vs {tuple(agg_t.shape)}")
        x = torch.cat([agg_rgb, agg_t], dim=1)
        out = {"SDC_in": x, "SDC_out": [], "DF_rgb": [], "DF_t": []}
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, 2, 2, ceil_mode=True)
            x = block(x)
            out["SDC_out"].append(x)
            out["DF_rgb"].append(self.heads["rgb"][i](x))
            out["DF_t"].append(self.heads["t"][i](x))
        return out


class PlainFusion(SDCFusion):
    """The "No SDC" ablation: one plain 3×3 convolution per scale instead of the dilated blocks."""

    def __init__(self, in_channels: int = 128, width: int = 128, out_channels: int = 64, levels: int = 4):
        super().__init__(in_channels, width, out_channels, dilations=(1,) * levels)
        self.blocks = nn.ModuleList(
            conv_bn_relu(in_channels if i == 0 else width, width, 3) for i in range(levels)
        )


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=lambda: get_preset("toy"))
    attention: str = "mcnet"
    sdc: bool = True
    channels: int = 64
    reduction: int = 16
    sdc_width: int = 128
    dilations: tuple = (1, 3, 5, 7)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["dilations"] = tuple(d.get("dilations", (1, 3, 5, 7)))
        return cls(**d)


@dataclass
class SaliencyOutput:
    logits_rgb: torch.Tensor
    logits_t: torch.Tensor
    logits_fusion: torch.Tensor
    first_rgb: torch.Tensor
    first_t: torch.Tensor
    features: Optional[dict] = None

    @property
    def pred_rgb(self):
        return torch.sigmoid(self.logits_rgb)

    @property
    def pred_t(self):
        return torch.sigmoid(self.logits_t)

    @property
    def pred_fusion(self):
        return torch.sigmoid(self.logits_fusion)


class MCNet(nn.Module):
    """Two independent encoders, cross-modal interaction, shared decoders run twice, SDC fusion."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.backbones = nn.ModuleDict({m: build_backbone(cfg.backbone) for m in MODALITIES})
        self.interaction = InteractionModule(cfg.backbone.channels[1:], cfg.channels,
                                             cfg.reduction, cfg.attention)
        self.decoders = nn.ModuleDict({m: Decoder(cfg.channels) for m in MODALITIES})
        if cfg.sdc:
            self.fusion = SDCFusion(2 * cfg.channels, cfg.sdc_width, cfg.channels, cfg.dilations)
        else:
            self.fusion = PlainFusion(2 * cfg.channels, cfg.sdc_width, cfg.channels)
        self.fusion_head = nn.Sequential(conv_bn_relu(2, 16, 3), nn.Conv2d(16, 1, 1))

    def forward(self, rgb: torch.Tensor, thermal: torch.Tensor, zero_df: bool = False,
                return_features: bool = False) -> SaliencyOutput:
        if rgb.dim() == 3:
            rgb, thermal = rgb.unsqueeze(0), thermal.unsqueeze(0)
        if thermal.shape[1] == 1:
            thermal = thermal.expand(-1, 3, -1, -1)
        if rgb.shape != thermal.shape:
            raise DimensionMismatchError(f"rgb {tuple(rgb.shape)} and thermal {tuple(thermal.shape)} are misaligned")
        size = rgb.shape[-2:]

        sf_rgb = self.backbones["rgb"](rgb)
        sf_t = self.backbones["t"](thermal)
        inter = self.interaction(sf_rgb[1:], sf_t[1:])
        agg_rgb, first_rgb = self.decoders["rgb"](inter["LF_rgb"], size)
        agg_t, first_t = self.decoders["t"](inter["LF_t"], size)
        sdc = self.fusion(agg_rgb, agg_t)
        df_rgb, df_t = sdc["DF_rgb"], sdc["DF_t"]
        if zero_df:
            df_rgb = [torch.zeros_like(d) for d in df_rgb]
            df_t = [torch.zeros_like(d) for d in df_t]
        _, logits_rgb = self.decoders["rgb"]([d + lf for d, lf in zip(df_rgb, inter["LF_rgb"])], size)
        _, logits_t = self.decoders["t"]([d + lf for d, lf in zip(df_t, inter["LF_t"])], size)
        logits_fusion = self.fusion_head(torch.cat([logits_rgb, logits_t], dim=1))

        features = None
        if return_features:
            features = {"SF_rgb": sf_rgb, "SF_t": sf_t, **inter,
                        "agg_rgb": agg_rgb, "agg_t": agg_t, **sdc}
        return SaliencyOutput(logits_rgb, logits_t, logits_fusion, first_rgb, first_t, features)

    def parameter_groups(self) -> dict:
        """Partition of trainable parameters into the two backbones and everything else."""
        groups = {"backbone": [], "other": []}
        for name, p in self.named_parameters():
            if p.requires_grad:
                groups["backbone" if name.startswith("backbones.") else "other"].append((name, p))
        return groups


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_flops(model: MCNet, size: Optional[int] = None) -> int:
    """Forward FLOPs for one image pair, counted by torch's dispatch-level counter."""
    from torch.utils.flop_counter import FlopCounterMode

    size = size or model.cfg.backbone.input_size
    x = torch.zeros(1, 3, size, size)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad(), FlopCounterMode(display=False) as counter:
            model(x, x)
    finally:
        model.train(was_training)
    return int(counter.get_total_flops())


def build_model(preset: str = "toy", **overrides) -> MCNet:
    backbone_overrides = {k[len("backbone_"):]: v for k, v in overrides.items() if k.startswith("backbone_")}
    rest = {k: v for k, v in overrides.items() if not k.startswith("backbone_")}
    return MCNet(ModelConfig(backbone=get_preset(preset, **backbone_overrides), **rest))
