"""Ablation, data-efficiency, cutout-noise and super-resolution experiments.

Every experiment is a grid of independent cells ``(mode, pct, seed)``. A cell
trains one model on a (possibly subsampled) training split, keeps the top-k
checkpoints by validation Dice and evaluates their ensemble on the test split.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (
    DatasetManifest,
    SplitSpec,
    StudySample,
    load_manifest,
    load_sample,
    split_patientwise,
    subsample_training,
)
from .metrics import MetricsReport, PairedScores, THRESHOLD, compute_report
from .network import ArchitectureConfig
from .preprocess import CutoutSpec, PreprocessConfig, apply_cutout, preprocess_sample, subsample_bscans
from .synthgen import SceneSpec, generate_dataset, load_exclusive
from .training import (
    Checkpoint,
    Ensemble,
    TrainConfig,
    scan_checkpoints,
    select_top_checkpoints,
    train,
)

log = logging.getLogger(__name__)

REPORT_HEADER = ["mode", "pct", "seed", "dice_mean", "dice_std", "hd95_mean", "auroc", "aupr", "p_vs_baseline"]
CURVES_HEADER = ["mode", "n_masks", "aupr"]


class ExperimentError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    out_dir: Path
    scene: SceneSpec = field(default_factory=SceneSpec)
    dataset_root: Optional[Path] = None  # generate into the cache when absent
    n_patients: int = 30
    samples_per_patient: int = 1
    data_seed: int = 0
    split_fractions: Tuple[float, float, float] = (0.6, 0.1, 0.3)
    split_seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: Tuple[str, ...] = ("volume_only", "multiscale")
    pcts: Tuple[float, ...] = (1.0,)
    noise_levels: Tuple[int, ...] = (0, 4, 8, 16, 32)
    seeds: Tuple[int, ...] = (0, 1, 2)
    baseline: str = "volume_only"
    superres_step: int = 2

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if not self.modes or not self.seeds:
            raise ExperimentError("modes and seeds must be non-empty")

    def to_dict(self) -> dict:
        return {
            "out_dir": str(self.out_dir),
            "scene": self.scene.to_dict(),
            "dataset_root": None if self.dataset_root is None else str(self.dataset_root),
            "n_patients": self.n_patients,
            "samples_per_patient": self.samples_per_patient,
            "data_seed": self.data_seed,
            "split_fractions": list(self.split_fractions),
            "split_seed": self.split_seed,
            "preprocess": asdict(self.preprocess),
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "modes": list(self.modes),
            "pcts": list(self.pcts),
            "noise_levels": list(self.noise_levels),
            "seeds": list(self.seeds),
            "baseline": self.baseline,
            "superres_step": self.superres_step,
        }


def cache_root() -> Path:
    return Path(os.environ.get("HETFUSE_CACHE", Path.home() / ".cache" / "hetfuse"))


def ensure_dataset(cfg: ExperimentConfig) -> DatasetManifest:
    if cfg.dataset_root is not None:
        return load_manifest(cfg.dataset_root)
    key = json.dumps(
        [cfg.scene.to_dict(), cfg.n_patients, cfg.samples_per_patient, cfg.data_seed], sort_keys=True
    )
    import hashlib

    root = cache_root() / ("synth_" + hashlib.sha256(key.encode()).hexdigest()[:16])
    if (root / "manifest.json").is_file():
        return load_manifest(root)
    return generate_dataset(cfg.scene, cfg.n_patients, cfg.samples_per_patient, cfg.data_seed, root)


@dataclass
class PreparedData:
    """Raw and preprocessed samples of one split, loaded once per experiment."""

    manifest: DatasetManifest
    split: SplitSpec
    raw: Dict[str, List[StudySample]]
    ids: Dict[str, List[str]]
    dirs: Dict[str, List[Path]]
    preprocess: Optional[PreprocessConfig]
    _prepped: Dict[str, List[StudySample]] = field(default_factory=dict)

    @classmethod
    def load(cls, manifest: DatasetManifest, split: SplitSpec, preprocess: PreprocessConfig) -> "PreparedData":
        raw, ids, dirs = {}, {}, {}
        for part in ("train", "val", "test"):
            members = split.part(part)
            entries = [(s, p) for s, p in manifest.samples if p in members]
            dirs[part] = [manifest.root / s for s, _ in entries]
            ids[part] = [s for s, _ in entries]
            raw[part] = [load_sample(d) for d in dirs[part]]
        return cls(manifest, split, raw, ids, dirs, preprocess)

    def prepped(self, part: str) -> List[StudySample]:
        if part not in self._prepped:
            self._prepped[part] = [maybe_preprocess(s, self.preprocess) for s in self.raw[part]]
        return self._prepped[part]

    def train_subset(self, sub: SplitSpec) -> List[StudySample]:
        return [s for s in self.prepped("train") if s.patient_id in sub.train]


def maybe_preprocess(sample: StudySample, cfg: Optional[PreprocessConfig]) -> StudySample:
    """``cfg=None`` marks data that was already preprocessed on disk."""
    return sample if cfg is None else preprocess_sample(sample, cfg)


def is_preprocessed(manifest: DatasetManifest) -> bool:
    return bool(manifest.extra.get("preprocessed"))


def evaluate_samples(predict_fn: Callable[[List[StudySample]], List[np.ndarray]], samples: Sequence[StudySample], ids: Sequence[str], pooled: bool = True) -> Tuple[MetricsReport, List[np.ndarray]]:
    if not samples:
        raise ExperimentError("cannot evaluate an empty split")
    probs = predict_fn(list(samples))
    report = compute_report(ids, probs, [s.mask for s in samples], [s.spacing for s in samples], pooled=pooled)
    return report, probs


def corrupt(samples: Sequence[StudySample], noise: Optional[CutoutSpec], level_seed: int = 0) -> List[StudySample]:
    """Cutout on raw volumes; copies only, the inputs are never modified."""
    if noise is None or noise.n_masks == 0:
        return list(samples)
    return [
        s.replace(volume=apply_cutout(s.volume, noise, derive_seed(level_seed, noise.n_masks, i)))
        for i, s in enumerate(samples)
    ]


def evaluate_model(
    checkpoints: Sequence[Checkpoint],
    arch: ArchitectureConfig,
    manifest: DatasetManifest,
    split: SplitSpec,
    split_part: str = "test",
    noise: Optional[CutoutSpec] = None,
    preprocess: Optional[PreprocessConfig] = PreprocessConfig(),
    image_modality: str = "slo",
    noise_seed: int = 0,
) -> MetricsReport:
    if split_part not in ("val", "test"):
        raise ExperimentError(f"split_part must be 'val' or 'test', got {split_part!r}")
    members = split.part(split_part)
    entries = [(s, p) for s, p in manifest.samples if p in members]
    if not entries:
        raise ExperimentError(f"split part {split_part!r} is empty")
    raw = [load_sample(manifest.root / s) for s, _ in entries]
    if is_preprocessed(manifest):
        preprocess = None
    samples = [maybe_preprocess(s, preprocess) for s in corrupt(raw, noise, noise_seed)]
    ens = Ensemble.from_checkpoints(checkpoints, arch, image_modality)
    report, _ = evaluate_samples(ens.predict, samples, [s for s, _ in entries])
    return report


@dataclass
class Row:
    mode: str
    pct: float
    seed: int
    report: Optional[MetricsReport]
    run_dir: Optional[Path] = None
    p_vs_baseline: Optional[float] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.report is None

    def csv_row(self) -> list:
        def f(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"

        r = self.report
        if r is None:
            return [self.mode, f"{self.pct:g}", self.seed, "", "", "", "", "", ""]
        return [self.mode, f"{self.pct:g}", self.seed, f(r.dice_mean), f(r.dice_std), f(r.hd95_mean),
                f(r.auroc), f(r.aupr), f(self.p_vs_baseline)]


@dataclass
class ReportTable:
    rows: List[Row]
    baseline: str = "volume_only"

    def get(self, mode: str, pct: float, seed: int) -> Optional[Row]:
        for r in self.rows:
            if r.mode == mode and math.isclose(r.pct, pct) and r.seed == seed:
                return r
        return None

    def attach_pvalues(self):
        for r in self.rows:
            if r.mode == self.baseline or r.failed:
                continue
            base = self.get(self.baseline, r.pct, r.seed)
            if base is None or base.failed:
                continue
            pairs = PairedScores.align(r.report.per_sample_dice(), base.report.per_sample_dice())
            r.p_vs_baseline = pairs.p_value()

    def seed_mean(self, mode: str, pct: float, attr: str = "dice_mean") -> float:
        vals = [getattr(r.report, attr) for r in self.rows if r.mode == mode and math.isclose(r.pct, pct) and not r.failed]
        return float(np.mean(vals)) if vals else float("nan")

    def summary_rows(self) -> List[list]:
        out = []
        keys = sorted({(r.mode, r.pct) for r in self.rows}, key=lambda k: (k[1], k[0]))
        for mode, pct in keys:
            cells = [r for r in self.rows if r.mode == mode and math.isclose(r.pct, pct) and not r.failed]
            if not cells:
                continue
            ps = [r.p_vs_baseline for r in cells if r.p_vs_baseline is not None]
            out.append([
                mode, f"{pct:g}", "mean",
                *(f"{np.mean([getattr(r.report, a) for r in cells]):.6g}"
                  for a in ("dice_mean", "dice_std", "hd95_mean", "auroc", "aupr")),
                f"{np.mean(ps):.6g}" if ps else "",
            ])
        return out

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow(r.csv_row())
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            w.writerows(self.summary_rows())
        failed = [r for r in self.rows if r.failed]
        if failed:
            (out_dir / "failures.txt").write_text(
                "".join(f"{r.mode},{r.pct:g},{r.seed}: {r.error}\n" for r in failed), encoding="utf-8"
            )
        return out_dir / "report.csv"


def cell_dir(cfg: ExperimentConfig, mode: str, pct: float, seed: int, tag: str = "") -> Path:
    return cfg.out_dir / "cells" / f"{tag}{mode}_p{pct:g}_s{seed}"


def _write_cell_meta(path: Path, cfg: ExperimentConfig, data: PreparedData, sub: SplitSpec, arch: ArchitectureConfig):
    doc = {
        "dataset_root": str(data.manifest.root),
        "split": sub.to_dict(),
        "preprocess": None if data.preprocess is None else asdict(data.preprocess),
        "arch": arch.to_dict(),
        "image_modality": cfg.train.image_modality,
    }
    (path / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def run_cell(
    cfg: ExperimentConfig,
    data: PreparedData,
    mode: str,
    pct: float,
    seed: int,
    train_transform: Callable[[StudySample], StudySample] = lambda s: s,
    tag: str = "",
) -> Row:
    sub = subsample_training(data.split, pct, seed=cfg.split_seed)
    arch = replace(cfg.arch, fusion_mode=mode)
    tcfg = replace(cfg.train, seed=derive_seed(cfg.data_seed, seed))
    out = cell_dir(cfg, mode, pct, seed, tag)
    out.mkdir(parents=True, exist_ok=True)
    try:
        tr = [train_transform(s) for s in data.train_subset(sub)]
        va = [train_transform(s) for s in data.prepped("val")]
        _write_cell_meta(out, cfg, data, sub, arch)
        (out / "train_patients.txt").write_text("\n".join(sorted(sub.train)) + "\n", encoding="utf-8")
        art = train(tcfg, arch, tr, va, out)
        top = select_top_checkpoints(art.checkpoints, tcfg.top_k)
        ens = Ensemble.from_checkpoints(top, arch, tcfg.image_modality)
        report, _ = evaluate_samples(ens.predict, data.prepped("test"), data.ids["test"])
    except Exception as e:  # a failed cell must not stop the grid
        log.exception("cell %s/%g/%d failed", mode, pct, seed)
        (out / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        return Row(mode, pct, seed, None, out, error=f"{type(e).__name__}: {e}")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    return Row(mode, pct, seed, report, out)


def _prepare(cfg: ExperimentConfig) -> PreparedData:
    manifest = ensure_dataset(cfg)
    split = split_patientwise(manifest, cfg.split_fractions, cfg.split_seed)
    return PreparedData.load(manifest, split, None if is_preprocessed(manifest) else cfg.preprocess)


def _echo(cfg: ExperimentConfig, kind: str):
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"kind": kind, **cfg.to_dict()}
    (cfg.out_dir / "experiment.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def run_grid(cfg: ExperimentConfig, data: Optional[PreparedData] = None, kind: str = "ablation") -> ReportTable:
    data = data or _prepare(cfg)
    _echo(cfg, kind)
    rows = []
    for pct in cfg.pcts:
        for seed in cfg.seeds:
            for mode in cfg.modes:
                rows.append(run_cell(cfg, data, mode, pct, seed))
    table = ReportTable(rows, cfg.baseline)
    table.attach_pvalues()
    table.write(cfg.out_dir)
    return table


def run_ablation(cfg: ExperimentConfig, data: Optional[PreparedData] = None) -> ReportTable:
    """Every fusion mode under the same split, subsets and seeds."""
    return run_grid(cfg, data, "ablation")


def run_data_efficiency(cfg: ExperimentConfig, data: Optional[PreparedData] = None) -> ReportTable:
    """The ablation grid over nested training subsets; logs the monotone-trend check."""
    table = run_grid(cfg, data, "data_efficiency")
    lines = []
    lo, hi = min(cfg.pcts), max(cfg.pcts)
    for mode in cfg.modes:
        a, b = table.seed_mean(mode, lo), table.seed_mean(mode, hi)
        lines.append(f"{mode}: dice@{lo:g}={a:.4f} dice@{hi:g}={b:.4f} monotone={b >= a}")
    (cfg.out_dir / "trend.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table


@dataclass
class CurveData:
    # (mode, n_masks, seed) -> pooled AUPR
    points: Dict[Tuple[str, int, int], float]

    def mean(self, mode: str, n_masks: int) -> float:
        vals = [v for (m, n, _), v in self.points.items() if m == mode and n == n_masks]
        return float(np.mean(vals)) if vals else float("nan")

    def curves(self) -> List[Tuple[str, int, float]]:
        keys = sorted({(m, n) for m, n, _ in self.points})
        return [(m, n, self.mean(m, n)) for m, n in keys]

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVES_HEADER)
            for m, n, v in self.curves():
                w.writerow([m, n, f"{v:.6g}"])
        with open(out_dir / "curves_by_seed.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "n_masks", "seed", "aupr"])
            for (m, n, s), v in sorted(self.points.items()):
                w.writerow([m, n, s, f"{v:.6g}"])
        return out_dir / "curves.csv"


def run_noise_sweep(cfg: ExperimentConfig, trained: ReportTable, data: Optional[PreparedData] = None) -> CurveData:
    """Pooled test AUPR per mode under growing cutout on the volume only."""
    data = data or _prepare(cfg)
    pct = max(r.pct for r in trained.rows)
    points = {}
    for row in trained.rows:
        if not math.isclose(row.pct, pct):
            continue
        ckpts = scan_checkpoints(row.run_dir) if row.run_dir is not None and (row.run_dir / "checkpoints").is_dir() else []
        if not ckpts:
            raise ExperimentError(f"no checkpoints for cell {row.mode}/{row.pct:g}/{row.seed}")
        arch = replace(cfg.arch, fusion_mode=row.mode)
        ens = Ensemble.from_checkpoints(select_top_checkpoints(ckpts, cfg.train.top_k), arch, cfg.train.image_modality)
        for level in cfg.noise_levels:
            noisy = corrupt(data.raw["test"], CutoutSpec(n_masks=level), cfg.data_seed)
            samples = [maybe_preprocess(s, data.preprocess) for s in noisy] if level else data.prepped("test")
            report, _ = evaluate_samples(ens.predict, samples, data.ids["test"])
            points[(row.mode, int(level), row.seed)] = report.aupr
    curves = CurveData(points)
    curves.write(cfg.out_dir)
    return curves


def exclusive_recall(probs: Sequence[np.ndarray], exclusive: Sequence[Optional[np.ndarray]]) -> float:
    hit = tot = 0
    for p, e in zip(probs, exclusive):
        if e is None:
            continue
        hit += int(((p >= THRESHOLD) & e).sum())
        tot += int(e.sum())
    return hit / tot if tot else float("nan")


def run_superres(cfg: ExperimentConfig, data: Optional[PreparedData] = None) -> ReportTable:
    """Train on every ``superres_step``-th B-scan, evaluate on full volumes.

    Rows carry ``exclusive_recall``: recall on mask pixels that only the 2D
    modality shows.
    """
    data = data or _prepare(cfg)
    step = cfg.superres_step
    if any(s.volume.shape[0] < 2 for s in data.raw["train"]):
        raise ExperimentError("super-resolution setting needs H >= 2")
    _echo(cfg, "superres")
    excl = [load_exclusive(d, s.mask.shape) for d, s in zip(data.dirs["test"], data.raw["test"])]
    rows = []
    lines = ["mode,pct,seed,exclusive_recall"]
    for pct in cfg.pcts:
        for seed in cfg.seeds:
            for mode in cfg.modes:
                row = run_cell(cfg, data, mode, pct, seed, lambda s: subsample_bscans(s, step), tag="superres_")
                if not row.failed:
                    ens = Ensemble.from_checkpoints(
                        select_top_checkpoints(scan_checkpoints(row.run_dir), cfg.train.top_k),
                        replace(cfg.arch, fusion_mode=mode), cfg.train.image_modality,
                    )
                    rec = exclusive_recall(ens.predict(data.prepped("test")), excl)
                    row.report.extra["exclusive_recall"] = rec
                    lines.append(f"{mode},{pct:g},{seed},{rec:.6g}")
                rows.append(row)
    table = ReportTable(rows, cfg.baseline)
    table.attach_pvalues()
    table.write(cfg.out_dir)
    (cfg.out_dir / "superres.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table
