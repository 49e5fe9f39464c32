"""Deterministic co-registered (volume, image, mask) scenes.

Two tasks are supported. ``lesion`` mimics atrophy: the bright surface band
is erased and the signal beneath it is enhanced. ``vessel`` draws thin curves
that appear as bright dots on the band with shadows below. The 2D image shows
every structure (lesions bright, vessels dark). A fraction of each structure's
footprint can be left out of the volume so only the 2D modality carries it,
and confounders add structure-like volume signal with no label.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import DatasetManifest, StudySample, save_sample

IMAGE_NAME = "slo"

# intensity levels of the layered background (arbitrary units, all positive)
VITREOUS, RETINA, BAND, CHOROID = 0.05, 0.35, 1.0, 0.3
BAND_THICKNESS = 2
RETINA_THICKNESS_FRAC = 0.35
FOV_MM = (6.0, 6.0, 1.92)


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    dims: Tuple[int, int, int] = (32, 128, 64)
    task: str = "lesion"
    n_structures: int = 3
    structure_scale: float = 6.0
    modality2d_exclusive_frac: float = 0.0
    confounder_count: int = 0
    noise_sigma: float = 0.03
    surface_tilt: float = 0.1
    seed_space: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise SceneError(f"dims must be 3 positive ints, got {self.dims}")
        if self.task not in ("lesion", "vessel"):
            raise SceneError(f"unknown task {self.task!r}")
        if not 0 <= self.modality2d_exclusive_frac <= 1:
            raise SceneError("modality2d_exclusive_frac must be in [0, 1]")
        if self.n_structures < 0 or self.confounder_count < 0:
            raise SceneError("structure counts must be >= 0")
        if self.structure_scale <= 0 or self.noise_sigma < 0:
            raise SceneError("structure_scale must be > 0 and noise_sigma >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Structure:
    kind: str
    center: Tuple[float, float]
    radius: float
    confounder: bool
    footprint: np.ndarray = field(repr=False)  # bool (H, W)
    exclusive: np.ndarray = field(repr=False)  # bool (H, W), subset of footprint

    def catalog_entry(self) -> dict:
        return {
            "kind": self.kind,
            "center": [round(float(c), 4) for c in self.center],
            "radius": round(float(self.radius), 4),
            "confounder": self.confounder,
            "n_pixels": int(self.footprint.sum()),
            "n_exclusive": int(self.exclusive.sum()),
        }


@dataclass
class SceneTruth:
    mask: np.ndarray
    surface: np.ndarray
    structures: List[Structure]

    @property
    def volume_visible(self) -> np.ndarray:
        """En-face pixels where some labeled structure is rendered in the volume."""
        vis = np.zeros(self.mask.shape, dtype=bool)
        for s in self.structures:
            if not s.confounder:
                vis |= s.footprint & ~s.exclusive
        return vis

    @property
    def exclusive_mask(self) -> np.ndarray:
        """Mask pixels that lack any volume evidence."""
        return self.mask.astype(bool) & ~self.volume_visible


def _rng(spec: SceneSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(spec.seed_space)]))


def _surface(spec: SceneSpec, rng) -> np.ndarray:
    H, W, D = spec.dims
    hh, ww = np.meshgrid(np.arange(H) - (H - 1) / 2, np.arange(W) - (W - 1) / 2, indexing="ij")
    th, tw = rng.uniform(-spec.surface_tilt, spec.surface_tilt, size=2)
    curv = rng.uniform(0, 0.5) * ((ww / max(W, 1)) ** 2) * D * 0.2
    s = D * 0.6 + th * hh * (W / max(H, 1)) * 0.25 + tw * ww + curv
    lo = int(np.ceil(D * RETINA_THICKNESS_FRAC)) + 2
    hi = D - BAND_THICKNESS - 3
    return np.clip(np.rint(s), lo, hi).astype(np.int32)


def _background(spec: SceneSpec, surface: np.ndarray, rng) -> np.ndarray:
    H, W, D = spec.dims
    r = np.arange(D)[None, None, :] - surface[..., None]  # depth relative to band top
    thick = max(2, int(D * RETINA_THICKNESS_FRAC))
    vol = np.full((H, W, D), VITREOUS, dtype=np.float32)
    retina = (r < 0) & (r >= -thick)
    # faint inner layering
    layers = RETINA + 0.1 * np.sin(2 * np.pi * r / max(thick / 3, 1.0))
    vol = np.where(retina, layers, vol)
    vol = np.where((r >= 0) & (r < BAND_THICKNESS), BAND, vol)
    below = r >= BAND_THICKNESS
    choroid = CHOROID * np.exp(-(r - BAND_THICKNESS) / max(D * 0.4, 1.0))
    vol = np.where(below, choroid, vol)
    return vol.astype(np.float32)


def _ordered_window(order_key: np.ndarray, frac: float, rng, random_start: bool) -> np.ndarray:
    """Indices of a contiguous run of round(frac * n) entries of the ordering."""
    n = order_key.size
    k = int(round(frac * n))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.argsort(order_key, kind="stable")
    start = int(rng.integers(0, n - k + 1)) if random_start else 0
    return idx[start : start + k]


def _lesion(spec: SceneSpec, rng, confounder: bool) -> Structure:
    H, W, _ = spec.dims
    r0 = spec.structure_scale
    rh, rw = r0 * rng.uniform(0.7, 1.3), r0 * rng.uniform(0.7, 1.3)
    if 2 * rh + 2 > H or 2 * rw + 2 > W:
        raise SceneError(f"lesion radius {r0} does not fit en-face dims {(H, W)}")
    ch = rng.uniform(rh, H - 1 - rh)
    cw = rng.uniform(rw, W - 1 - rw)
    ang = rng.uniform(0, np.pi)
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dh, dw = hh - ch, ww - cw
    u = dh * np.cos(ang) + dw * np.sin(ang)
    v = -dh * np.sin(ang) + dw * np.cos(ang)
    fp = (u / rh) ** 2 + (v / rw) ** 2 <= 1.0
    if not fp.any():
        fp[int(round(ch)), int(round(cw))] = True
    excl = np.zeros_like(fp)
    if not confounder and spec.modality2d_exclusive_frac > 0:
        coords = np.argwhere(fp)
        theta = rng.uniform(0, 2 * np.pi)
        key = coords[:, 0] * np.cos(theta) + coords[:, 1] * np.sin(theta)
        sel = coords[_ordered_window(key, spec.modality2d_exclusive_frac, rng, False)]
        excl[sel[:, 0], sel[:, 1]] = True
    return Structure("lesion", (ch, cw), float(np.sqrt(rh * rw)), confounder, fp, excl)


def _vessel(spec: SceneSpec, rng, confounder: bool) -> Structure:
    H, W, _ = spec.dims
    rad = spec.structure_scale
    if 2 * rad + 2 > min(H, W):
        raise SceneError(f"vessel radius {rad} does not fit en-face dims {(H, W)}")
    # smoothed random walk, mostly running along W
    length = rng.uniform(0.5, 0.9) * W
    step = 0.5
    n = max(2, int(length / step))
    p = np.array([rng.uniform(0.2, 0.8) * (H - 1), rng.uniform(0.0, 0.3) * (W - 1)])
    heading = rng.uniform(-0.5, 0.5)
    turn = gaussian_filter(rng.normal(0, 0.1, size=n), sigma=6)
    pts = np.empty((n, 2))
    for i in range(n):
        pts[i] = p
        heading += turn[i]
        # steer back towards the middle rows to keep the curve inside
        heading -= 0.02 * (p[0] - (H - 1) / 2) / max(H, 1)
        p = p + step * np.array([np.sin(heading), np.cos(heading)])
        p[0] = np.clip(p[0], rad, H - 1 - rad)
        if p[1] > W - 1 - rad or p[1] < rad:
            pts = pts[: i + 1]
            break
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pix = np.stack([hh.ravel(), ww.ravel()], axis=1).astype(np.float64)
    lo = np.floor(pts.min(0) - rad - 1).astype(int)
    hi = np.ceil(pts.max(0) + rad + 1).astype(int)
    box = (pix[:, 0] >= lo[0]) & (pix[:, 0] <= hi[0]) & (pix[:, 1] >= lo[1]) & (pix[:, 1] <= hi[1])
    cand = pix[box]
    d2 = ((cand[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(1)
    inside = d2.min(1) <= rad**2
    fp = np.zeros((H, W), dtype=bool)
    ci = cand[inside].astype(int)
    fp[ci[:, 0], ci[:, 1]] = True
    excl = np.zeros_like(fp)
    if not confounder and spec.modality2d_exclusive_frac > 0 and len(ci):
        sel = ci[_ordered_window(nearest[inside].astype(float), spec.modality2d_exclusive_frac, rng, True)]
        excl[sel[:, 0], sel[:, 1]] = True
    center = tuple(pts.mean(0))
    return Structure("vessel", center, float(rad), confounder, fp, excl)


def _render_volume(vol: np.ndarray, surface: np.ndarray, cols: np.ndarray, task: str):
    """Draw structure signal into the volume columns selected by ``cols``."""
    D = vol.shape[2]
    r = np.arange(D)[None, :] - surface[cols][:, None]
    col = vol[cols]
    if task == "lesion":
        band = (r >= 0) & (r < BAND_THICKNESS)
        col = np.where(band, RETINA, col)
        col = np.where(r >= BAND_THICKNESS, np.minimum(col * 3.0 + 0.3, 1.2), col)
    else:
        dot = (r >= -3) & (r < 0)
        col = np.where(dot, 1.2, col)
        col = np.where(r >= BAND_THICKNESS, col * 0.25, col)
        col = np.where((r >= 0) & (r < BAND_THICKNESS), BAND * 0.6, col)
    vol[cols] = col.astype(np.float32)


def generate_scene_with_truth(spec: SceneSpec, seed: int) -> Tuple[StudySample, SceneTruth]:
    H, W, D = spec.dims
    if D < 12:
        raise SceneError(f"depth {D} too small for the layered background (need >= 12)")
    rng = _rng(spec, seed)
    surface = _surface(spec, rng)
    vol = _background(spec, surface, rng)
    make = _lesion if spec.task == "lesion" else _vessel
    structures = [make(spec, rng, False) for _ in range(spec.n_structures)]
    structures += [make(spec, rng, True) for _ in range(spec.confounder_count)]

    mask = np.zeros((H, W), dtype=bool)
    for s in structures:
        if not s.confounder:
            mask |= s.footprint
    vis = np.zeros((H, W), dtype=bool)
    for s in structures:
        vis |= s.footprint & ~s.exclusive
    _render_volume(vol, surface, vis, spec.task)

    tex = gaussian_filter(rng.normal(0, 1, size=(H, W)), sigma=2.0)
    tex = tex / (tex.std() + 1e-8)
    image = 0.5 + 0.08 * tex
    if spec.task == "lesion":
        image = np.where(mask, image + 0.4, image)
    else:
        image = np.where(mask, image - 0.3, image)

    if spec.noise_sigma > 0:
        vol = vol + rng.normal(0, spec.noise_sigma, size=vol.shape)
        image = image + rng.normal(0, spec.noise_sigma, size=image.shape)

    spacing = (FOV_MM[0] / H, FOV_MM[1] / W, FOV_MM[2] / D)
    sample = StudySample(
        patient_id="synthetic",
        eye_id="OD",
        volume=vol.astype(np.float32),
        images={IMAGE_NAME: image.astype(np.float32)},
        mask=mask.astype(np.uint8),
        surface=surface,
        spacing=spacing,
    )
    truth = SceneTruth(mask=sample.mask, surface=surface, structures=structures)
    return sample.validate(), truth


def generate_scene(spec: SceneSpec, seed: int) -> StudySample:
    return generate_scene_with_truth(spec, seed)[0]


def save_truth(truth: SceneTruth, dir) -> None:
    d = Path(dir)
    (d / "exclusive.u8").write_bytes(truth.exclusive_mask.astype(np.uint8).tobytes())
    doc = {"structures": [s.catalog_entry() for s in truth.structures]}
    (d / "truth.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_exclusive(dir, shape) -> Optional[np.ndarray]:
    """2D-exclusive mask pixels stored next to a generated sample, or None."""
    p = Path(dir) / "exclusive.u8"
    if not p.is_file():
        return None
    return np.frombuffer(p.read_bytes(), dtype=np.uint8).reshape(shape).astype(bool)


def patient_seed(seed: int, patient: int, sample: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(patient), int(sample)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_dataset(spec: SceneSpec, n_patients: int, samples_per_patient: int, seed: int, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in range(n_patients):
        pid = f"P{p:03d}"
        for s in range(samples_per_patient):
            sample, truth = generate_scene_with_truth(spec, patient_seed(seed, p, s))
            sample = sample.replace(patient_id=pid, eye_id="OD")
            rel = f"{pid}_S{s:02d}"
            save_sample(sample, out / rel)
            save_truth(truth, out / rel)
            entries.append((rel, pid))
    manifest = DatasetManifest(
        root=out,
        samples=entries,
        extra={"generator": {"spec": spec.to_dict(), "seed": seed, "n_patients": n_patients,
                             "samples_per_patient": samples_per_patient}},
    )
    manifest.save()
    return manifest
