"""Flat ``dotted.key = value`` configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Lists are comma separated. Every accepted key is declared in
``SCHEMA``; anything else is rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .experiments import ExperimentConfig
from .network import ArchitectureConfig
from .preprocess import AugmentPolicy, PreprocessConfig
from .synthgen import SceneSpec
from .training import TrainConfig


class ConfigKeyError(KeyError):
    def __init__(self, key: str, msg: str = "unknown config key"):
        super().__init__(key)
        self.key = key
        self.msg = msg

    def __str__(self):
        return f"{self.msg}: {self.key}"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    help: str


SCHEMA: Dict[str, Key] = {
    "seed": Key(int, "0", "global seed: data generation, split, subsets and training"),
    "data.root": Key(str, "", "dataset directory with manifest.json; empty = generate into the cache"),
    "data.n_patients": Key(int, "30", "synthetic patients to generate"),
    "data.samples_per_patient": Key(int, "1", "synthetic samples per patient"),
    "synth.dims": Key(_list(int), "32,128,64", "scene dims H,W,D"),
    "synth.task": Key(str, "lesion", "lesion | vessel"),
    "synth.n_structures": Key(int, "3", "labelled structures per scene"),
    "synth.structure_scale": Key(float, "6.0", "lesion radius / vessel half-width in pixels"),
    "synth.exclusive_frac": Key(float, "0.0", "fraction of each structure only visible in 2D"),
    "synth.confounders": Key(int, "0", "unlabelled volume-only mimics per scene"),
    "synth.noise_sigma": Key(float, "0.03", "Gaussian noise on both modalities"),
    "synth.surface_tilt": Key(float, "0.1", "max surface slope (voxels per pixel)"),
    "preprocess.out_depth": Key(int, "128", "depth window kept around the flattened surface"),
    "preprocess.above_frac": Key(float, "0.75", "fraction of the window above the surface"),
    "preprocess.anchor_depth": Key(int, "-1", "flattening anchor; -1 = D // 2"),
    "split.fractions": Key(_list(float), "0.6,0.1,0.3", "train,val,test patient fractions"),
    "split.train_pct": Key(float, "1.0", "fraction of training patients used by `train`"),
    "arch.fusion_mode": Key(str, "multiscale", "volume_only | image_only | late | multiscale"),
    "arch.levels": Key(int, "5", "encoder/decoder levels"),
    "arch.channels": Key(_list(int), "", "per-level widths; empty = base_channels doubling"),
    "arch.base_channels": Key(int, "16", "level-0 width"),
    "arch.max_channels": Key(int, "256", "width cap"),
    "arch.enc_convs": Key(int, "8", "convolutions per encoder block (even)"),
    "arch.dec_convs": Key(int, "4", "convolutions per decoder block (even)"),
    "arch.fpb_convs": Key(int, "2", "convolutions per feature projection block"),
    "arch.fpb_kernel": Key(int, "3", "feature projection kernel size"),
    "arch.fpb_depth_stride": Key(int, "2", "depth stride of the first projection conv"),
    "train.epochs": Key(int, "800", "training epochs"),
    "train.lr": Key(float, "0.1", "SGD learning rate"),
    "train.momentum": Key(float, "0.9", "SGD momentum"),
    "train.batch_size": Key(int, "8", "batch size"),
    "train.checkpoint_every": Key(int, "10", "epochs between checkpoints"),
    "train.top_k": Key(int, "5", "checkpoints averaged at inference"),
    "train.augment": Key(_bool, "true", "enable augmentation"),
    "train.image_modality": Key(str, "slo", "name of the 2D modality"),
    "augment.flip_prob": Key(float, "0.5", "flip probability per en-face axis"),
    "augment.mult_range": Key(_list(float), "0.9,1.1", "multiplicative factor range"),
    "augment.add_sigma": Key(float, "0.05", "additive noise sigma"),
    "augment.contrast_range": Key(_list(float), "0.9,1.1", "contrast gain range"),
    "augment.shift_range": Key(_list(float), "-0.1,0.1", "intensity shift range"),
    "experiment.kind": Key(str, "ablation", "ablation | data_efficiency | noise | superres"),
    "experiment.modes": Key(_list(str), "volume_only,multiscale", "fusion modes to compare"),
    "experiment.pcts": Key(_list(float), "1.0", "training-data fractions"),
    "experiment.noise_levels": Key(_list(int), "0,4,8,16,32", "cutout box counts"),
    "experiment.seeds": Key(_list(int), "0,1,2", "training seeds per cell"),
    "experiment.baseline": Key(str, "volume_only", "row the p-values compare against"),
    "experiment.superres_step": Key(int, "2", "B-scan subsampling step"),
}


def parse_text(text: str) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k] = v
    return out


def resolve(file_text: str = "", overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """Defaults <- config file <- ``key=value`` overrides, parsed and checked."""
    raw = {k: key.default for k, key in SCHEMA.items()}
    given = parse_text(file_text)
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override must be key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        given[k.strip()] = v.strip()
    for k, v in given.items():
        if k not in SCHEMA:
            raise ConfigKeyError(k)
        raw[k] = v
    out = {}
    for k, v in raw.items():
        try:
            out[k] = SCHEMA[k].parse(v)
        except ValueError as e:
            raise ConfigKeyError(k, f"bad value {v!r} ({e}) for key") from e
    return out


def dump(cfg: Dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in SCHEMA)


def help_text() -> str:
    return "\n".join(f"  {k:28s} {SCHEMA[k].help} (default: {SCHEMA[k].default or '-'})" for k in SCHEMA)


def scene_spec(c: Dict[str, Any]) -> SceneSpec:
    return SceneSpec(
        dims=c["synth.dims"],
        task=c["synth.task"],
        n_structures=c["synth.n_structures"],
        structure_scale=c["synth.structure_scale"],
        modality2d_exclusive_frac=c["synth.exclusive_frac"],
        confounder_count=c["synth.confounders"],
        noise_sigma=c["synth.noise_sigma"],
        surface_tilt=c["synth.surface_tilt"],
    )


def preprocess_config(c: Dict[str, Any]) -> PreprocessConfig:
    a = c["preprocess.anchor_depth"]
    return PreprocessConfig(c["preprocess.out_depth"], c["preprocess.above_frac"], None if a < 0 else a)


def arch_config(c: Dict[str, Any]) -> ArchitectureConfig:
    return ArchitectureConfig(
        levels=c["arch.levels"],
        base_channels=c["arch.base_channels"],
        max_channels=c["arch.max_channels"],
        channel_schedule=c["arch.channels"] or None,
        enc_convs_per_block=c["arch.enc_convs"],
        dec_convs_per_block=c["arch.dec_convs"],
        fpb_convs=c["arch.fpb_convs"],
        fpb_kernel=c["arch.fpb_kernel"],
        fpb_depth_stride=c["arch.fpb_depth_stride"],
        fusion_mode=c["arch.fusion_mode"],
    )


def train_config(c: Dict[str, Any]) -> TrainConfig:
    policy = AugmentPolicy(
        flip_prob=c["augment.flip_prob"],
        mult_noise_range=c["augment.mult_range"],
        add_noise_sigma=c["augment.add_sigma"],
        contrast_range=c["augment.contrast_range"],
        intensity_shift_range=c["augment.shift_range"],
    )
    return TrainConfig(
        epochs=c["train.epochs"],
        lr=c["train.lr"],
        momentum=c["train.momentum"],
        batch_size=c["train.batch_size"],
        seed=c["seed"],
        augment=c["train.augment"],
        policy=policy,
        checkpoint_every=c["train.checkpoint_every"],
        top_k=c["train.top_k"],
        image_modality=c["train.image_modality"],
    )


def experiment_config(c: Dict[str, Any], out_dir) -> ExperimentConfig:
    return ExperimentConfig(
        out_dir=Path(out_dir),
        scene=scene_spec(c),
        dataset_root=Path(c["data.root"]) if c["data.root"] else None,
        n_patients=c["data.n_patients"],
        samples_per_patient=c["data.samples_per_patient"],
        data_seed=c["seed"],
        split_fractions=c["split.fractions"],
        split_seed=c["seed"],
        preprocess=preprocess_config(c),
        arch=arch_config(c),
        train=train_config(c),
        modes=c["experiment.modes"],
        pcts=c["experiment.pcts"],
        noise_levels=c["experiment.noise_levels"],
        seeds=c["experiment.seeds"],
        baseline=c["experiment.baseline"],
        superres_step=c["experiment.superres_step"],
    )
