"""Hierarchical shifted-window attention encoder.

Each modality gets its own :class:`SwinEncoder`. ``forward`` returns a
five-level pyramid: the patch embedding (stride 4) followed by the four stage
outputs at strides 4, 8, 16 and 32.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, DimensionMismatchError

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PYRAMID_STRIDES = (4, 4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 128
    depths: tuple = (2, 2, 18, 2)
    num_heads: tuple = (4, 8, 16, 32)
    window_size: int = 12
    input_size: int = 384
    mlp_ratio: float = 4.0
    pretrained_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("depths and num_heads must each have 4 entries")
        for i, heads in enumerate(self.num_heads):
            if (self.embed_dim * 2**i) % heads:
                raise ValueError(
                    f"stage {i + 1} width {self.embed_dim * 2**i} not divisible by {heads} heads"
                )
        align = self.patch_size * 8
        if self.input_size % align:
            raise ValueError(f"input_size {self.input_size} must be a multiple of {align}")

    @property
    def channels(self) -> tuple:
        c = self.embed_dim
        return (c, c, 2 * c, 4 * c, 8 * c)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # weights: swin_base_patch4_window12_384_22k
    "swin_b": BackboneConfig(),
    "swin_s": BackboneConfig(embed_dim=96, depths=(2, 2, 18, 2), num_heads=(3, 6, 12, 24)),
    "swin_t": BackboneConfig(embed_dim=96, depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24)),
    "toy": BackboneConfig(embed_dim=32, depths=(1, 1, 1, 1), num_heads=(2, 4, 8, 16),
                          window_size=3, input_size=96),
    "tiny": BackboneConfig(embed_dim=16, depths=(1, 1, 1, 1), num_heads=(1, 2, 4, 8),
                           window_size=2, input_size=32),
}


def get_preset(name: str, **overrides) -> BackboneConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None
    if overrides:
        cfg = BackboneConfig(**{**cfg.to_dict(), **overrides})
    return cfg


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window * window, C); H and W must be multiples of window."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shifted_window_mask(H: int, W: int, window: int, shift: int) -> torch.Tensor:
    """Additive mask (nW, N, N) that blocks attention between regions wrapped by the cyclic shift."""
    img = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    regions = window_partition(img, window).squeeze(-1)
    mask = regions[:, None, :] - regions[:, :, None]
    return mask.masked_fill(mask != 0, float(-100.0)).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        if dim % num_heads:
            raise DimensionMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def attention_weights(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B_, N, C = x.shape
        q, k, _ = self._qkv(x)
        return self._softmax(q, k, mask, B_, N)

    def _qkv(self, x):
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def _softmax(self, q, k, mask, B_, N):
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(B_, self.num_heads, N, N)
        return attn.softmax(dim=-1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B_, N, C = x.shape
        q, k, v = self._qkv(x)
        attn = self._softmax(q, k, mask, B_, N)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm windowed attention + MLP, both residual. Operates on (B, H, W, C) tokens.

    Token grids that are not a multiple of the window are zero-padded for
    attention and cropped back. Shifting is disabled when the grid fits
    inside a single window.
    """

    def __init__(self, dim: int, num_heads: int, window: int, shift: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.dim = dim
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def _geometry(self, H: int, W: int):
        window = self.window
        shift = window // 2 if self.shift else 0
        if min(H, W) <= window:
            shift = 0
        return window, shift

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        window, shift = self._geometry(H, W)
        pad_b = (window - H % window) % window
        pad_r = (window - W % window) % window
        x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r
        mask = None
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(Hp, Wp, window, shift).to(x.dtype)
        windows = window_partition(x, window)
        windows = self.attn(windows, mask)
        x = window_reverse(windows, window, Hp, Wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x[:, :H, :W, :]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, H/p, W/p, C) tokens."""
        H, W = x.shape[-2:]
        p = self.patch_size
        if H % p or W % p:
            raise DimensionMismatchError(f"image size {H}x{W} not divisible by patch size {p}")
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, H/2, W/2, 2C)."""
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise DimensionMismatchError(f"patch merging needs even grid, got {H}x{W}")
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: int, mlp_ratio: float,
                 downsample: bool):
        super().__init__()
        self.merge = PatchMerging(dim // 2) if downsample else None
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window, shift=bool(i % 2), mlp_ratio=mlp_ratio)
            for i in range(depth)
        )

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.patch_size, C)
        self.stages = nn.ModuleList(
            SwinStage(C * 2**i, cfg.depths[i], cfg.num_heads[i], cfg.window_size,
                      cfg.mlp_ratio, downsample=i > 0)
            for i in range(4)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(C * 2**i) for i in range(4))
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """(B, 3, H, W) -> [SF1..SF5], each (B, C_i, H_i, W_i)."""
        x = self.patch_embed(x)
        pyramid = [x.permute(0, 3, 1, 2).contiguous()]
        for stage, norm in zip(self.stages, self.norms):
            x = stage(x)
            pyramid.append(norm(x).permute(0, 3, 1, 2).contiguous())
        return pyramid


def _init_weights(m: nn.Module):
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def encode(image: torch.Tensor, encoder: SwinEncoder) -> list[torch.Tensor]:
    """Accepts a single (3, H, W) image or a (B, 3, H, W) batch."""
    single = image.dim() == 3
    pyramid = encoder(image.unsqueeze(0) if single else image)
    return [f[0] for f in pyramid] if single else pyramid


# Output norms of stages 0..2 exist only here; official checkpoints carry just the final one.
LOCAL_ONLY_PREFIXES = ("norms.0.", "norms.1.", "norms.2.")


# Official Swin checkpoint names -> names in this module. The official layout
# attaches patch merging to the end of stage i; here it opens stage i + 1.
def translate_swin_key(key: str) -> Optional[str]:
    if key.startswith("head.") or key.endswith(("relative_position_index", "attn_mask")):
        return None
    if key.startswith("layers."):
        parts = key.split(".")
        i = int(parts[1])
        if parts[2] == "downsample":
            return ".".join(["stages", str(i + 1), "merge"] + parts[3:])
        return ".".join(["stages", str(i)] + parts[2:])
    if key.startswith("norm."):
        return "norms.3." + key[len("norm."):]
    return key


def save_backbone(encoder: SwinEncoder, path: str | os.PathLike) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "backbone",
        "config": encoder.cfg.to_dict(),
        "state_dict": encoder.state_dict(),
    }
    torch.save(payload, path)


def load_pretrained(encoder: SwinEncoder, path: str | os.PathLike, strict: bool = True) -> dict:
    """Load weights saved by :func:`save_backbone` or an official Swin checkpoint.

    Returns a report with ``loaded``, ``missing``, ``mismatched``, ``unexpected``
    and ``initialized`` key lists; the last holds the per-stage output norms an
    official checkpoint does not provide, which keep their fresh initialization.
    In strict mode any shape mismatch, missing or unexpected key raises
    :class:`CheckpointError`; otherwise mismatches are skipped and reported.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = torch.load(path, map_location="cpu", weights_only=False)
    local = ()
    if isinstance(raw, dict) and raw.get("kind") == "backbone":
        state = raw["state_dict"]
    else:
        state = raw.get("model", raw) if isinstance(raw, dict) else raw
        state = {k2: v for k, v in state.items() if (k2 := translate_swin_key(k)) is not None}
        local = LOCAL_ONLY_PREFIXES

    own = encoder.state_dict()
    loaded, mismatched, unexpected = {}, [], []
    for key, value in state.items():
        if key not in own:
            unexpected.append(key)
        elif own[key].shape != value.shape:
            if strict:
                raise CheckpointError(
                    f"shape mismatch for {key}: checkpoint {tuple(value.shape)} vs model {tuple(own[key].shape)}"
                )
            mismatched.append(key)
        else:
            loaded[key] = value
    initialized = [k for k in own if k not in loaded and k.startswith(local) and k not in state]
    missing = [k for k in own if k not in loaded and k not in mismatched and k not in initialized]
    if strict and (missing or unexpected):
        raise CheckpointError(f"strict load failed: missing={missing[:5]} unexpected={unexpected[:5]}")
    encoder.load_state_dict(loaded, strict=False)
    if mismatched or missing or unexpected:
        _logger.warning("backbone load: %d mismatched, %d missing, %d unexpected",
                        len(mismatched), len(missing), len(unexpected))
    return {"loaded": sorted(loaded), "missing": missing, "mismatched": mismatched,
            "unexpected": unexpected, "initialized": initialized}


def build_backbone(cfg: BackboneConfig, strict: bool = True) -> SwinEncoder:
    encoder = SwinEncoder(cfg)
    if cfg.pretrained_path:
        load_pretrained(encoder, cfg.pretrained_path, strict=strict)
    return encoder
