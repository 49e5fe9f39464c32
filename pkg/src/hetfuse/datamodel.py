"""Samples, on-disk format, manifests and patient-wise splitting.

Arrays use the (H, W, D) axis order throughout: H is the B-scan index
(en-face height), W the en-face width and D the A-scan depth.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class SampleError(Exception):
    """Base class for sample I/O and validation failures."""


class MissingFileError(SampleError):
    pass


class ShapeMismatchError(SampleError):
    pass


class InvariantError(SampleError):
    pass


class SampleIOError(SampleError):
    pass


@dataclass
class StudySample:
    """One co-registered case.

    ``volume`` is float32 (H, W, D), ``images`` maps a modality name to a
    float32 (H', W') grid, ``mask`` is uint8 (H, W) with values in {0, 1}
    and ``surface`` (optional) holds int32 depth indices of the flattening
    reference. ``spacing`` is mm per voxel along (H, W, D).
    """

    patient_id: str
    eye_id: str
    volume: np.ndarray
    images: Dict[str, np.ndarray]
    mask: np.ndarray
    surface: Optional[np.ndarray] = None
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.volume = np.ascontiguousarray(self.volume, dtype=np.float32)
        self.images = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.images.items()}
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.surface is not None:
            self.surface = np.ascontiguousarray(self.surface, dtype=np.int32)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.volume.shape)

    def validate(self) -> "StudySample":
        if self.volume.ndim != 3 or self.volume.shape[2] < 1:
            raise InvariantError(f"volume must be (H, W, D) with D >= 1, got {self.volume.shape}")
        if not np.isfinite(self.volume).all():
            raise InvariantError("volume contains non-finite values")
        for name, img in self.images.items():
            if img.ndim != 2:
                raise InvariantError(f"image {name!r} must be 2D, got {img.shape}")
            if not np.isfinite(img).all():
                raise InvariantError(f"image {name!r} contains non-finite values")
        if self.mask.shape != self.volume.shape[:2]:
            raise InvariantError(
                f"mask dims {self.mask.shape} differ from volume en-face dims {self.volume.shape[:2]}"
            )
        if self.mask.size and self.mask.max() > 1:
            raise InvariantError("mask is not binary")
        if self.surface is not None:
            if self.surface.shape != self.volume.shape[:2]:
                raise InvariantError(f"surface dims {self.surface.shape} differ from volume en-face dims")
            if self.surface.size and (self.surface.min() < 0 or self.surface.max() >= self.volume.shape[2]):
                raise InvariantError("surface index outside volume depth range")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvariantError(f"spacing must be 3 positive values, got {self.spacing}")
        return self

    def replace(self, **changes) -> "StudySample":
        kw = dict(
            patient_id=self.patient_id,
            eye_id=self.eye_id,
            volume=self.volume,
            images=dict(self.images),
            mask=self.mask,
            surface=self.surface,
            spacing=self.spacing,
        )
        kw.update(changes)
        return StudySample(**kw)


def _write(path: Path, arr: np.ndarray, dtype: str):
    try:
        path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C"))
    except OSError as e:
        raise SampleIOError(f"cannot write {path}: {e}") from e


def _read(path: Path, dtype: str, shape: Sequence[int]) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    if raw.size != int(np.prod(shape)):
        raise ShapeMismatchError(f"{path}: expected {tuple(shape)} = {int(np.prod(shape))} values, found {raw.size}")
    return raw.reshape(shape).copy()


def save_sample(sample: StudySample, dir) -> None:
    """Write ``sample`` to ``dir`` (created if needed)."""
    d = Path(dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SampleIOError(f"cannot create {d}: {e}") from e
    if not os.access(d, os.W_OK):
        raise SampleIOError(f"directory not writable: {d}")
    names = sorted(sample.images)
    meta = {
        "format_version": FORMAT_VERSION,
        "patient_id": sample.patient_id,
        "eye_id": sample.eye_id,
        "shapes": {
            "volume": list(sample.volume.shape),
            "mask": list(sample.mask.shape),
            "images": {n: list(sample.images[n].shape) for n in names},
            "surface": None if sample.surface is None else list(sample.surface.shape),
        },
        "spacing_mm": list(sample.spacing),
        "dtypes": {"volume": "<f4", "images": "<f4", "mask": "u1", "surface": "<i4"},
        "modalities": names,
        "surface": None if sample.surface is None else "surface.i32",
    }
    _write(d / "volume.f32", sample.volume, "<f4")
    for n in names:
        _write(d / f"image_{n}.f32", sample.images[n], "<f4")
    _write(d / "mask.u8", sample.mask, "u1")
    if sample.surface is not None:
        _write(d / "surface.i32", sample.surface, "<i4")
    try:
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise SampleIOError(f"cannot write {d / 'meta.json'}: {e}") from e


def load_sample(dir) -> StudySample:
    d = Path(dir)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise MissingFileError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    shapes = meta["shapes"]
    volume = _read(d / "volume.f32", "<f4", shapes["volume"])
    images = {n: _read(d / f"image_{n}.f32", "<f4", shapes["images"][n]) for n in meta["modalities"]}
    mask = _read(d / "mask.u8", "u1", shapes["mask"])
    surface = None
    if meta.get("surface"):
        surface = _read(d / meta["surface"], "<i4", shapes["surface"])
    sample = StudySample(
        patient_id=meta["patient_id"],
        eye_id=meta["eye_id"],
        volume=volume,
        images=images,
        mask=mask,
        surface=surface,
        spacing=tuple(meta["spacing_mm"]),
    )
    return sample.validate()


@dataclass
class DatasetManifest:
    root: Path
    samples: List[Tuple[str, str]]  # (sample_dir relative to root, patient_id)
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        dirs = [s for s, _ in self.samples]
        if len(set(dirs)) != len(dirs):
            raise ValueError("sample_dir entries must be unique")
        if any(not p for _, p in self.samples):
            raise ValueError("every manifest entry needs a patient_id")

    @property
    def patients(self) -> List[str]:
        return sorted({p for _, p in self.samples})

    def dirs_for(self, patients) -> List[Path]:
        wanted = set(patients)
        return [self.root / s for s, p in self.samples if p in wanted]

    def load(self, patients=None) -> List[StudySample]:
        if patients is None:
            return [load_sample(self.root / s) for s, _ in self.samples]
        return [load_sample(d) for d in self.dirs_for(patients)]

    def save(self) -> Path:
        doc = {
            "format_version": self.format_version,
            "samples": [{"dir": s, "patient_id": p} for s, p in self.samples],
        }
        doc.update(self.extra)
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
        return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    extra = {k: v for k, v in doc.items() if k not in ("format_version", "samples")}
    return DatasetManifest(
        root=root,
        samples=[(e["dir"], e["patient_id"]) for e in doc["samples"]],
        format_version=doc["format_version"],
        extra=extra,
    )


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    val: frozenset
    test: frozenset
    train_pct: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split partitions overlap")
        if not 0 < self.train_pct <= 1:
            raise ValueError(f"train_pct must be in (0, 1], got {self.train_pct}")

    def part(self, name: str) -> frozenset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def to_dict(self) -> dict:
        return {
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
            "train_pct": self.train_pct,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(frozenset(d["train"]), frozenset(d["val"]), frozenset(d["test"]), d["train_pct"], d["seed"])


def largest_remainder(n: int, fractions: Sequence[float]) -> List[int]:
    quotas = [f * n for f in fractions]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    rest = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_patientwise(manifest: DatasetManifest, fractions=(0.6, 0.1, 0.3), seed: int = 0) -> SplitSpec:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    patients = manifest.patients
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    n_train, n_val, _ = largest_remainder(len(patients), fractions)
    perm = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in perm]
    return SplitSpec(
        train=frozenset(shuffled[:n_train]),
        val=frozenset(shuffled[n_train : n_train + n_val]),
        test=frozenset(shuffled[n_train + n_val :]),
        train_pct=1.0,
        seed=seed,
    )


def subsample_training(split: SplitSpec, pct: float, seed: int = 0) -> SplitSpec:
    """Keep ceil(pct * |train|) patients: a prefix of one seeded permutation,
    so smaller subsets are always contained in larger ones."""
    if not 0 < pct <= 1:
        raise ValueError(f"pct must be in (0, 1], got {pct}")
    train = sorted(split.train)
    k = math.ceil(pct * len(train) - 1e-9)
    perm = np.random.default_rng(seed).permutation(len(train))
    kept = frozenset(train[i] for i in perm[:k])
    return SplitSpec(kept, split.val, split.test, train_pct=pct, seed=split.seed)
