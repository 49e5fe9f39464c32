"""Image branch, Volume branch and the Late / Multiscale fused models.

Volumes enter as (B, 1, H, W, D) and images as (B, C, H, W). The Volume
branch encodes in 3D, projects every level to 2D with a Feature Projection
Block (convolutions + average over depth) and decodes in 2D.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_MODES = ("volume_only", "image_only", "late", "multiscale")


class ConfigError(ValueError):
    pass


class PaddingRequiredError(ValueError):
    pass


class MissingModalityError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    levels: int = 5
    base_channels: int = 16
    max_channels: int = 256
    channel_schedule: Optional[Tuple[int, ...]] = None  # overrides base/max when given
    enc_convs_per_block: int = 8
    dec_convs_per_block: int = 4
    fpb_convs: int = 2
    fpb_kernel: int = 3
    fpb_depth_stride: int = 2
    fusion_mode: str = "multiscale"
    image_channels: int = 1

    def __post_init__(self):
        if self.channel_schedule is not None:
            self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        self.validate()

    @property
    def widths(self) -> Tuple[int, ...]:
        if self.channel_schedule is not None:
            return self.channel_schedule
        return tuple(min(self.base_channels * 2**i, self.max_channels) for i in range(self.levels))

    @property
    def uses_volume(self) -> bool:
        return self.fusion_mode != "image_only"

    @property
    def uses_image(self) -> bool:
        return self.fusion_mode != "volume_only"

    def validate(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if len(self.widths) != self.levels or min(self.widths) < 1:
            raise ConfigError(f"channel schedule {self.widths} must have {self.levels} positive widths")
        for name in ("enc_convs_per_block", "dec_convs_per_block"):
            v = getattr(self, name)
            if v < 2 or v % 2:
                raise ConfigError(f"{name} must be even and >= 2, got {v}")
        if self.fpb_convs < 1:
            raise ConfigError("fpb_convs must be >= 1")
        if self.image_channels < 1:
            raise ConfigError("image_channels must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        if d.get("channel_schedule") is not None:
            d["channel_schedule"] = tuple(d["channel_schedule"])
        return cls(**d)


def _conv(dim: int):
    return nn.Conv3d if dim == 3 else nn.Conv2d


def _norm(dim: int, ch: int):
    return (nn.InstanceNorm3d if dim == 3 else nn.InstanceNorm2d)(ch, affine=True)


class ResidualUnit(nn.Module):
    """Pre-activation unit: (norm, relu, conv) x 2 plus identity."""

    def __init__(self, ch: int, dim: int):
        super().__init__()
        Conv = _conv(dim)
        self.body = nn.Sequential(
            _norm(dim, ch), nn.ReLU(), Conv(ch, ch, 3, padding=1),
            _norm(dim, ch), nn.ReLU(), Conv(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int, dim: int, stride: int = 1):
        super().__init__()
        self.entry = _conv(dim)(in_ch, out_ch, 3, stride=stride, padding=1)
        self.units = nn.Sequential(*[ResidualUnit(out_ch, dim) for _ in range(n_convs // 2)])

    def forward(self, x):
        return self.units(self.entry(x))


class FeatureProjectionBlock(nn.Module):
    """3D -> 2D: a few convolutions, then the mean over the whole depth axis."""

    def __init__(self, ch: int, n_convs: int = 2, kernel: int = 3, depth_stride: int = 2):
        super().__init__()
        layers = []
        for i in range(n_convs):
            stride = (1, 1, depth_stride) if i == 0 else 1
            layers += [nn.Conv3d(ch, ch, kernel, stride=stride, padding=kernel // 2), _norm(3, ch), nn.ReLU()]
        self.convs = nn.Sequential(*layers)

    def forward(self, x):
        x = self.convs(x)
        return F.adaptive_avg_pool3d(x, (x.shape[2], x.shape[3], 1)).squeeze(-1)


def resize_to_min(features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Adaptive-max-pool every 2D feature map to the smallest (H, W) among them."""
    if len(features) == 0:
        raise ValueError("resize_to_min needs at least one feature map")
    h = min(f.shape[-2] for f in features)
    w = min(f.shape[-1] for f in features)
    return [f if f.shape[-2:] == (h, w) else F.adaptive_max_pool2d(f, (h, w)) for f in features]


class Encoder(nn.Module):
    def __init__(self, in_ch: int, widths: Sequence[int], n_convs: int, dim: int):
        super().__init__()
        blocks, prev = [], in_ch
        for i, w in enumerate(widths):
            blocks.append(ResidualBlock(prev, w, n_convs, dim, stride=1 if i == 0 else 2))
            prev = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="nearest"))


class Decoder(nn.Module):
    """2D decoder; ``skip_channels[l]`` is the width of the level-l skip input."""

    def __init__(self, widths: Sequence[int], skip_channels: Sequence[int], n_convs: int):
        super().__init__()
        L = len(widths)
        self.ups = nn.ModuleList([Upsample(widths[l + 1], widths[l]) for l in range(L - 1)])
        blocks = []
        for l in range(L):
            in_ch = skip_channels[l] + (widths[l] if l < L - 1 else 0)
            blocks.append(ResidualBlock(in_ch, widths[l], n_convs, dim=2))
        self.blocks = nn.ModuleList(blocks)
        self.out_norm = _norm(2, widths[0])

    def forward(self, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        L = len(self.blocks)
        x = self.blocks[L - 1](skips[L - 1])
        for l in range(L - 2, -1, -1):
            up = self.ups[l](x, skips[l].shape[-2:])
            x = self.blocks[l](torch.cat([up, skips[l]], dim=1))
        return F.relu(self.out_norm(x))


class FusionNet(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths
        mode = config.fusion_mode
        if config.uses_volume:
            self.vol_encoder = Encoder(1, widths, config.enc_convs_per_block, dim=3)
            self.fpbs = nn.ModuleList(
                [FeatureProjectionBlock(w, config.fpb_convs, config.fpb_kernel, config.fpb_depth_stride) for w in widths]
            )
        if config.uses_image:
            self.img_encoder = Encoder(config.image_channels, widths, config.enc_convs_per_block, dim=2)
        if mode in ("volume_only", "late"):
            self.vol_decoder = Decoder(widths, widths, config.dec_convs_per_block)
        if mode in ("image_only", "late"):
            self.img_decoder = Decoder(widths, widths, config.dec_convs_per_block)
        if mode == "multiscale":
            self.vol_decoder = Decoder(widths, [2 * w for w in widths], config.dec_convs_per_block)
        head_in = 2 * widths[0] if mode == "late" else widths[0]
        self.head = nn.Conv2d(head_in, 1, 1)

    def _check(self, x, spatial_dims: int, name: str):
        f = 2 ** (self.config.levels - 1)
        dims = tuple(x.shape[2 : 2 + spatial_dims])
        if any(d % f for d in dims):
            raise PaddingRequiredError(f"{name} spatial dims {dims} must be divisible by {f}; pad the input")

    def features(self, volume: Optional[torch.Tensor] = None, image: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Decoder output fed to the final 1x1 convolution."""
        cfg = self.config
        if cfg.uses_volume and volume is None:
            raise MissingModalityError(f"fusion_mode {cfg.fusion_mode!r} needs a volume")
        if cfg.uses_image and image is None:
            raise MissingModalityError(f"fusion_mode {cfg.fusion_mode!r} needs an image")
        targets = []
        if volume is not None:
            self._check(volume, 3, "volume")
            targets.append(tuple(volume.shape[2:4]))
        if image is not None:
            self._check(image, 2, "image")
            targets.append(tuple(image.shape[2:4]))
        out_hw = (min(t[0] for t in targets), min(t[1] for t in targets))

        if cfg.uses_volume:
            proj = [fpb(f) for fpb, f in zip(self.fpbs, self.vol_encoder(volume))]
        if cfg.uses_image:
            img_feats = self.img_encoder(image)

        mode = cfg.fusion_mode
        if mode == "volume_only":
            outs = [self.vol_decoder(proj)]
        elif mode == "image_only":
            outs = [self.img_decoder(img_feats)]
        elif mode == "late":
            outs = resize_to_min([self.vol_decoder(proj), self.img_decoder(img_feats)])
        else:
            skips = [torch.cat(resize_to_min([p, m]), dim=1) for p, m in zip(proj, img_feats)]
            outs = [self.vol_decoder(skips)]
        x = torch.cat(outs, dim=1)
        if tuple(x.shape[-2:]) != out_hw:
            x = F.adaptive_max_pool2d(x, out_hw)
        return x

    def forward(self, volume: Optional[torch.Tensor] = None, image: Optional[torch.Tensor] = None) -> torch.Tensor:
        return torch.sigmoid(self.head(self.features(volume, image)))


def build_model(config: ArchitectureConfig, seed: Optional[int] = None) -> FusionNet:
    """Construct the model; ``seed`` fixes the (fan-in scaled) default initialisation."""
    if seed is None:
        return FusionNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FusionNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# Checkpoint format: a safetensors file (8-byte little-endian header length,
# JSON header, raw little-endian float32 tensors keyed by parameter name).
# The header metadata carries "arch" (ArchitectureConfig as JSON) plus any
# extra string fields such as "epoch" and "val_dice".

def save_checkpoint(model: FusionNet, path, **meta) -> Path:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().to(torch.float32).contiguous() for k, v in model.state_dict().items()}
    metadata = {"arch": json.dumps(model.config.to_dict(), sort_keys=True)}
    metadata.update({k: json.dumps(v) for k, v in meta.items()})
    save_file(tensors, str(path), metadata=metadata)
    return path


def read_checkpoint(path) -> Tuple[ArchitectureConfig, Dict[str, torch.Tensor], dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    arch = ArchitectureConfig.from_dict(json.loads(meta.pop("arch")))
    return arch, tensors, {k: json.loads(v) for k, v in meta.items()}


def load_checkpoint(path, expect: Optional[ArchitectureConfig] = None) -> FusionNet:
    arch, tensors, _ = read_checkpoint(path)
    if expect is not None and arch.to_dict() != expect.to_dict():
        raise ConfigError(f"checkpoint {path} was written for a different architecture")
    model = FusionNet(arch)
    model.load_state_dict(tensors)
    model.eval()
    return model


def to_batch(volumes=None, images=None) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    """Stack numpy (H, W, D) volumes and (H, W) or (C, H, W) images into network tensors."""
    v = i = None
    if volumes is not None:
        v = torch.from_numpy(np.stack(volumes).astype(np.float32))[:, None]
    if images is not None:
        arr = np.stack(images).astype(np.float32)
        if arr.ndim == 3:
            arr = arr[:, None]
        i = torch.from_numpy(arr)
    return v, i
