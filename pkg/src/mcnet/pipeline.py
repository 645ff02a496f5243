"""Training loop, checkpoints and batch prediction."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import DatasetManifest, batch_iterator, normalize, scan_dataset
from .errors import CheckpointError, DataError, NonFiniteLossError
from .fusion import MCNet, ModelConfig
from .labels import IMAGE_EXTENSIONS, to_uint8
from .losses import total_loss

_logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("epoch", "l_rgb", "l_thermal", "l_fusion", "total")


@dataclass
class TrainConfig:
    epochs: int = 48
    batch_size: int = 16
    lr_backbone: float = 0.005
    lr_other: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    input_size: int = 384
    seed: int = 0
    backbone_preset: str = "swin_b"
    dataset_root: str = ""
    checkpoint_dir: str = "checkpoints"
    pretrained_path: str = ""
    attention: str = "mcnet"
    sdc: bool = True
    augment: bool = True
    grad_clip: float = 0.0
    deterministic: bool = True
    cache_images: bool = True
    save_every: int = 1  # epochs between epoch_XXX.pt snapshots; 0 keeps only last.pt

    def __post_init__(self):
        if min(self.lr_backbone, self.lr_other) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_backbone >= self.lr_other:
            raise ValueError("lr_backbone must be smaller than lr_other")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.save_every < 0:
            raise ValueError("save_every must be >= 0")

    def model_config(self) -> ModelConfig:
        overrides = {"backbone_input_size": self.input_size}
        if self.pretrained_path:
            overrides["backbone_pretrained_path"] = self.pretrained_path
        return build_model_config(self.backbone_preset, attention=self.attention, sdc=self.sdc, **overrides)


def build_model_config(preset: str, **overrides) -> ModelConfig:
    from .backbone import get_preset

    bb = {k[len("backbone_"):]: v for k, v in overrides.items() if k.startswith("backbone_")}
    rest = {k: v for k, v in overrides.items() if not k.startswith("backbone_")}
    return ModelConfig(backbone=get_preset(preset, **bb), **rest)


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def parse_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def make_train_config(values: dict) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(values) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, types[k]) if isinstance(v, str) else v for k, v in values.items()}
    return TrainConfig(**kwargs)


def lr_schedule(step: int, total_steps: int, lr_max: float) -> float:
    """Triangular: 0 -> lr_max over the first half of training, back to 0 over the second."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    half = total_steps / 2
    if step <= half:
        return lr_max * step / half
    return lr_max * (total_steps - step) / half


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic, warn_only=False)


def atomic_save(obj, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: Optional[dict]
    epoch: int
    step: int
    config: dict
    model_config: dict
    rng_state: Optional[torch.Tensor] = None
    format_version: int = CHECKPOINT_VERSION

    def save(self, path) -> Path:
        atomic_save(asdict(self), Path(path))
        return Path(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        raw = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(raw, dict) or raw.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format")
        return cls(**raw)

    def build_model(self) -> MCNet:
        cfg = ModelConfig.from_dict(self.model_config)
        cfg.backbone = type(cfg.backbone)(**{**cfg.backbone.to_dict(), "pretrained_path": None})
        model = MCNet(cfg)
        model.load_state_dict(self.model_state)
        return model


def make_optimizer(model: MCNet, cfg: TrainConfig) -> torch.optim.SGD:
    groups = model.parameter_groups()
    ids = [id(p) for _, p in groups["backbone"]] + [id(p) for _, p in groups["other"]]
    all_ids = [id(p) for p in model.parameters() if p.requires_grad]
    assert len(ids) == len(set(ids)) and set(ids) == set(all_ids), "parameter groups must partition the model"
    _logger.info("parameter groups: backbone=%d tensors (%d values), other=%d tensors (%d values)",
                 len(groups["backbone"]), sum(p.numel() for _, p in groups["backbone"]),
                 len(groups["other"]), sum(p.numel() for _, p in groups["other"]))
    return torch.optim.SGD(
        [
            {"params": [p for _, p in groups["backbone"]], "lr": 0.0, "max_lr": cfg.lr_backbone,
             "name": "backbone"},
            {"params": [p for _, p in groups["other"]], "lr": 0.0, "max_lr": cfg.lr_other, "name": "other"},
        ],
        lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )


def _append_log(path: Path, epoch: int, parts: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOSS_COLUMNS)
        writer.writerow([epoch] + [repr(parts[k]) for k in LOSS_COLUMNS[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(cfg: TrainConfig, resume: Optional[str | os.PathLike] = None, stop_after: Optional[int] = None,
          manifest: Optional[DatasetManifest] = None) -> Checkpoint:
    """Train with SGD and the triangular schedule over ``epochs * ceil(N / batch_size)`` steps.

    Writes ``epoch_XXX.pt`` every ``save_every`` epochs, ``last.pt`` at the end (or when
    ``stop_after`` global steps have run) and appends one row per step to
    ``loss_log.csv``. ``resume`` continues from a saved checkpoint.
    """
    set_determinism(cfg.seed, cfg.deterministic)
    manifest = manifest or scan_dataset(cfg.dataset_root)
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.csv"

    model = MCNet(cfg.model_config())
    optimizer = make_optimizer(model, cfg)
    step = 0
    if resume is not None:
        ckpt = Checkpoint.load(resume)
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        step = ckpt.step
        if ckpt.rng_state is not None:
            torch.set_rng_state(ckpt.rng_state)
    elif log_path.exists():
        log_path.unlink()

    steps_per_epoch = math.ceil(len(manifest) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    cache = {} if cfg.cache_images else None
    snapshot = asdict(cfg)
    model.train()

    def checkpoint(epoch):
        return Checkpoint(model.state_dict(), optimizer.state_dict(), epoch, step, snapshot,
                          model.cfg.to_dict(), torch.get_rng_state())

    start_epoch, start_batch = divmod(step, steps_per_epoch)
    for epoch in range(start_epoch, cfg.epochs):
        batches = batch_iterator(manifest, cfg.batch_size, shuffle=True, seed=cfg.seed,
                                 size=cfg.input_size, train=cfg.augment, epoch=epoch,
                                 start_batch=start_batch if epoch == start_epoch else 0, cache=cache)
        for batch in batches:
            for group in optimizer.param_groups:
                group["lr"] = lr_schedule(step, total_steps, group["max_lr"])
            out = model(batch["rgb"], batch["thermal"])
            losses = total_loss(out.pred_rgb, out.pred_t, out.pred_fusion,
                                batch["gt"], batch["skeleton"], batch["contour"])
            if not torch.isfinite(losses.total):
                dump = out_dir / f"nonfinite_step{step}.json"
                dump.write_text(json.dumps({"step": step, "epoch": epoch, "names": batch["names"],
                                            "losses": {k: str(v) for k, v in losses.as_floats().items()}}))
                raise NonFiniteLossError(f"non-finite loss at step {step}; batch dumped to {dump}",
                                         batch["names"])
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            _append_log(log_path, epoch + 1, losses.as_floats())
            if stop_after is not None and step >= stop_after:
                ckpt = checkpoint(epoch)
                ckpt.save(out_dir / "last.pt")
                return ckpt
        if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            checkpoint(epoch + 1).save(out_dir / f"epoch_{epoch + 1:03d}.pt")
    ckpt = checkpoint(cfg.epochs)
    ckpt.save(out_dir / "last.pt")
    return ckpt


def _prepare_image(path: Path, size: int) -> tuple[torch.Tensor, tuple]:
    with Image.open(path) as im:
        im = im.convert("RGB")
        orig = im.size[::-1]
        arr = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    return normalize(torch.from_numpy(arr.transpose(2, 0, 1).copy())), orig


@torch.no_grad()
def predict_pair(model: MCNet, rgb_path, t_path, size: int):
    """Fused/branch probabilities resized back to the RGB image's original resolution."""
    rgb, orig = _prepare_image(Path(rgb_path), size)
    thermal, _ = _prepare_image(Path(t_path), size)
    out = model(rgb[None], thermal[None])
    maps = {"fusion": out.pred_fusion, "rgb": out.pred_rgb, "t": out.pred_t}
    return {k: F.interpolate(v, size=orig, mode="bilinear", align_corners=False)[0, 0].numpy()
            for k, v in maps.items()}


def scan_pairs(root) -> list[tuple[str, Path, Path]]:
    root = Path(root)
    dirs = {}
    for sub in ("RGB", "T"):
        if not (root / sub).is_dir():
            raise DataError(f"missing subdirectory {root / sub}")
        dirs[sub] = {p.stem: p for p in sorted((root / sub).iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS}
    return [(n, dirs["RGB"][n], dirs["T"][n]) for n in sorted(set(dirs["RGB"]) & set(dirs["T"]))]


def predict(checkpoint, input_root, out_dir, branches: bool = False, errors: list | None = None) -> int:
    """Write ``<out>/<name>.png`` fused maps (plus ``_rgb``/``_t`` maps with ``branches``)."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    model = ckpt.build_model().eval()
    size = model.cfg.backbone.input_size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for name, rgb_path, t_path in scan_pairs(input_root):
        try:
            maps = predict_pair(model, rgb_path, t_path, size)
        except (OSError, DataError, RuntimeError) as exc:
            _logger.error("prediction failed for %s: %s", name, exc)
            if errors is not None:
                errors.append(name)
            continue
        Image.fromarray(to_uint8(maps["fusion"])).save(out_dir / f"{name}.png")
        if branches:
            Image.fromarray(to_uint8(maps["rgb"])).save(out_dir / f"{name}_rgb.png")
            Image.fromarray(to_uint8(maps["t"])).save(out_dir / f"{name}_t.png")
        count += 1
    return count


@torch.no_grad()
def predict_manifest(model: MCNet, manifest: DatasetManifest, size: int, batch_size: int = 8):
    """In-memory fused predictions and gts at ``size`` resolution, keyed by name."""
    model.eval()
    preds = {}
    for batch in batch_iterator(manifest, batch_size, size=size):
        out = model(batch["rgb"], batch["thermal"])
        for name, p, g in zip(batch["names"], out.pred_fusion, batch["gt"]):
            preds[name] = (p[0].numpy().astype(np.float64), g[0].numpy() > 0.5)
    return preds


FEATURE_PATTERN = "{kind}{level}[_rgb|_t]  e.g. SF1_rgb, F2_t, LF3_rgb, SDC_out4, DF5_t"


def select_feature(features: dict, name: str) -> torch.Tensor:
    """Look up a named intermediate such as ``LF2_rgb`` or ``SDC_out3`` in a feature dict."""
    base, _, modality = name.rpartition("_") if name.endswith(("_rgb", "_t")) else (name, "", "")
    kind = base.rstrip("0123456789")
    level = base[len(kind):]
    if not level:
        raise KeyError(f"feature name {name!r} has no level; expected {FEATURE_PATTERN}")
    key = f"{kind}_{modality}" if modality else kind
    if key not in features:
        raise KeyError(f"unknown feature {name!r}; expected {FEATURE_PATTERN}")
    offset = 1 if kind == "SF" else 2
    return features[key][int(level) - offset]


@torch.no_grad()
def dump_features(model: MCNet, rgb_path, t_path, names, out_dir, size: Optional[int] = None) -> list[Path]:
    from .visualize import save_feature_grid

    model.eval()
    size = size or model.cfg.backbone.input_size
    rgb, _ = _prepare_image(Path(rgb_path), size)
    thermal, _ = _prepare_image(Path(t_path), size)
    out = model(rgb[None], thermal[None], return_features=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in names:
        fmap = select_feature(out.features, name)[0]
        path = out_dir / f"{Path(rgb_path).stem}_{name}.png"
        save_feature_grid(fmap.numpy(), path)
        written.append(path)
    return written
