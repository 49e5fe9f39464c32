"""Geometric/intensity preprocessing, augmentation and cutout corruption."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import StudySample

ZSCORE_EPS = 1e-8


def flatten_along_surface(volume: np.ndarray, surface: np.ndarray, anchor_depth: int) -> np.ndarray:
    """Shift every A-scan so that the voxel at ``surface[h, w]`` lands at
    ``anchor_depth``. Vacated positions are zero."""
    H, W, D = volume.shape
    if surface.shape != (H, W):
        raise ValueError(f"surface dims {surface.shape} != volume en-face dims {(H, W)}")
    if not 0 <= anchor_depth < D:
        raise ValueError(f"anchor_depth {anchor_depth} outside [0, {D})")
    if surface.size and (surface.min() < 0 or surface.max() >= D):
        raise ValueError("surface index outside volume depth range")
    shift = anchor_depth - surface.astype(np.int64)
    src = np.arange(D)[None, None, :] - shift[..., None]
    valid = (src >= 0) & (src < D)
    out = np.take_along_axis(volume, np.clip(src, 0, D - 1), axis=2)
    out[~valid] = 0
    return out.astype(np.float32, copy=False)


def crop_depth(volume: np.ndarray, anchor_depth: int, out_depth: int = 128, above_frac: float = 0.75) -> np.ndarray:
    """Cut a window of ``out_depth`` voxels along D starting at
    ``anchor_depth - floor(above_frac * out_depth)``; out-of-range parts are zero."""
    if out_depth < 1:
        raise ValueError("out_depth must be >= 1")
    H, W, D = volume.shape
    start = anchor_depth - int(math.floor(above_frac * out_depth))
    out = np.zeros((H, W, out_depth), dtype=np.float32)
    lo, hi = max(start, 0), min(start + out_depth, D)
    if hi > lo:
        out[:, :, lo - start : hi - start] = volume[:, :, lo:hi]
    return out


def zscore(grid: np.ndarray) -> np.ndarray:
    x = grid.astype(np.float64)
    sd = x.std()
    if sd <= ZSCORE_EPS:
        return np.zeros_like(grid, dtype=np.float32)
    return ((x - x.mean()) / sd).astype(np.float32)


def align_enface(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Center-crop to the target aspect ratio, then bilinear resample
    (half-pixel centers, no corner alignment)."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1")
    h, w = image.shape
    if (h, w) == (target_h, target_w):
        return image.astype(np.float32, copy=True)
    if h * target_w > w * target_h:
        ch, cw = max(1, round(w * target_h / target_w)), w
    else:
        ch, cw = h, max(1, round(h * target_w / target_h))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = image[top : top + ch, left : left + cw]
    if crop.shape == (target_h, target_w):
        return crop.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


@dataclass
class PreprocessConfig:
    out_depth: int = 128
    above_frac: float = 0.75
    anchor_depth: Optional[int] = None  # None -> D // 2
    normalize: bool = True


def preprocess_sample(sample: StudySample, cfg: PreprocessConfig = PreprocessConfig()) -> StudySample:
    """Flatten, crop along depth, align 2D modalities to the volume grid and z-score."""
    H, W, D = sample.volume.shape
    anchor = D // 2 if cfg.anchor_depth is None else cfg.anchor_depth
    vol = sample.volume
    if sample.surface is not None:
        vol = flatten_along_surface(vol, sample.surface, anchor)
    vol = crop_depth(vol, anchor, cfg.out_depth, cfg.above_frac)
    images = {k: align_enface(v, H, W) for k, v in sample.images.items()}
    if cfg.normalize:
        vol = zscore(vol)
        images = {k: zscore(v) for k, v in images.items()}
    surface = None
    if sample.surface is not None:
        surface = np.full((H, W), int(math.floor(cfg.above_frac * cfg.out_depth)), dtype=np.int32)
        surface = np.clip(surface, 0, cfg.out_depth - 1)
    return sample.replace(volume=vol, images=images, surface=surface)


def subsample_bscans(sample: StudySample, step: int = 2) -> StudySample:
    """Keep every ``step``-th B-scan (H index) of the volume, mask and surface.
    2D modalities are left untouched."""
    H = sample.volume.shape[0]
    if H < 2:
        raise ValueError(f"need at least 2 B-scans to subsample, got H={H}")
    sp = sample.spacing
    return sample.replace(
        volume=sample.volume[::step].copy(),
        mask=sample.mask[::step].copy(),
        surface=None if sample.surface is None else sample.surface[::step].copy(),
        spacing=(sp[0] * step, sp[1], sp[2]),
    )


@dataclass
class AugmentPolicy:
    flip_prob: float = 0.5
    mult_noise_range: Tuple[float, float] = (0.9, 1.1)
    add_noise_sigma: float = 0.05
    contrast_range: Tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: Tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")
        for name in ("mult_noise_range", "contrast_range", "intensity_shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        if self.add_noise_sigma < 0:
            raise ValueError("add_noise_sigma must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), (0.0, 0.0))

    def to_dict(self):
        return asdict(self)


def _intensity(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    mult = rng.uniform(*policy.mult_noise_range)
    gain = rng.uniform(*policy.contrast_range)
    shift = rng.uniform(*policy.intensity_shift_range)
    mean = float(x.mean())
    y = x * np.float32(mult)
    y = y * np.float32(gain) + np.float32(mean * (1.0 - gain))
    y = y + np.float32(shift)
    if policy.add_noise_sigma > 0:
        y = y + rng.normal(0.0, policy.add_noise_sigma, size=x.shape).astype(np.float32)
    return y.astype(np.float32, copy=False)


def augment_sample(sample: StudySample, policy: AugmentPolicy, rng_seed: int) -> StudySample:
    """Random en-face flips (shared by every grid) and per-modality intensity jitter.
    The mask only ever receives the geometric part."""
    rng = np.random.default_rng(rng_seed)
    flip_h = rng.random() < policy.flip_prob
    flip_w = rng.random() < policy.flip_prob
    axes = tuple(a for a, f in ((0, flip_h), (1, flip_w)) if f)

    def geo(a):
        return np.ascontiguousarray(np.flip(a, axis=axes)) if axes else a

    vol = _intensity(geo(sample.volume), policy, rng)
    images = {k: _intensity(geo(sample.images[k]), policy, rng) for k in sorted(sample.images)}
    return sample.replace(
        volume=vol,
        images=images,
        mask=geo(sample.mask).copy(),
        surface=None if sample.surface is None else geo(sample.surface).copy(),
    )


@dataclass
class CutoutSpec:
    n_masks: int = 0
    frac: Tuple[float, float, float] = (0.95, 0.1, 0.1)
    fill_band: float = 0.1

    def __post_init__(self):
        if self.n_masks < 0:
            raise ValueError("n_masks must be >= 0")
        if any(not 0 < f <= 1 for f in self.frac):
            raise ValueError(f"cutout fractions must be in (0, 1], got {self.frac}")

    def box_dims(self, shape) -> Tuple[int, int, int]:
        return tuple(max(1, int(math.floor(f * n))) for f, n in zip(self.frac, shape))


def apply_cutout(volume: np.ndarray, spec: CutoutSpec, rng_seed: int) -> np.ndarray:
    """Replace ``n_masks`` random boxes with uniform noise around the volume mean."""
    if volume.size == 0:
        raise ValueError("empty volume")
    if spec.n_masks == 0:
        return volume.copy()
    box = spec.box_dims(volume.shape)
    if any(b > n for b, n in zip(box, volume.shape)):
        raise ValueError(f"cutout box {box} larger than volume {volume.shape}")
    rng = np.random.default_rng(rng_seed)
    mu = float(volume.mean(dtype=np.float64))
    lo, hi = sorted((mu - spec.fill_band * mu, mu + spec.fill_band * mu))
    out = volume.copy()
    for _ in range(spec.n_masks):
        s = [int(rng.integers(0, n - b + 1)) for b, n in zip(box, volume.shape)]
        region = tuple(slice(a, a + b) for a, b in zip(s, box))
        out[region] = rng.uniform(lo, hi, size=box).astype(np.float32)
    return out
