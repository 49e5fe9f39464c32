"""SGD training loop, checkpoint selection and checkpoint-ensemble inference."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .datamodel import StudySample
from .metrics import THRESHOLD, dice_bce_loss, dice_score
from .network import (
    ArchitectureConfig,
    ConfigError,
    FusionNet,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    to_batch,
)
from .preprocess import AugmentPolicy, augment_sample

log = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"


@dataclass
class TrainConfig:
    epochs: int = 800
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    checkpoint_every: int = 10
    top_k: int = 5
    image_modality: str = "slo"

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = AugmentPolicy(**self.policy)
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.top_k < 1 or self.checkpoint_every < 1 or self.epochs < 0:
            raise ConfigError("epochs, batch_size, top_k and checkpoint_every must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    path: Path
    epoch: int
    val_dice: float


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoints: List[Checkpoint]
    train_loss: List[float]
    val_dice: List[float]
    config: dict

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)


class TrainingError(RuntimeError):
    pass


def model_inputs(samples: Sequence[StudySample], arch: ArchitectureConfig, image_modality: str):
    vols = [s.volume for s in samples] if arch.uses_volume else None
    imgs = None
    if arch.uses_image:
        try:
            imgs = [s.images[image_modality] for s in samples]
        except KeyError as e:
            raise ConfigError(f"sample lacks 2D modality {image_modality!r}") from e
    return to_batch(vols, imgs)


def predict(model: FusionNet, samples: Sequence[StudySample], image_modality: str = "slo", batch_size: int = 4) -> List[np.ndarray]:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            v, im = model_inputs(samples[i : i + batch_size], model.config, image_modality)
            out.extend(p[0].numpy() for p in model(v, im))
    return out


def mean_dice(model: FusionNet, samples: Sequence[StudySample], image_modality: str) -> float:
    if not samples:
        return float("nan")
    probs = predict(model, samples, image_modality)
    return float(np.mean([dice_score(p >= THRESHOLD, s.mask) for p, s in zip(probs, samples)]))


def _check_dims(arch: ArchitectureConfig, samples: Sequence[StudySample]):
    f = 2 ** (arch.levels - 1)
    for s in samples:
        dims = s.volume.shape if arch.uses_volume else s.mask.shape
        if any(d % f for d in dims):
            raise TrainingError(
                f"sample {s.patient_id} dims {dims} not divisible by {f} required by a {arch.levels}-level model"
            )


def train(
    config: TrainConfig,
    arch: ArchitectureConfig,
    train_samples: Sequence[StudySample],
    val_samples: Sequence[StudySample],
    run_dir,
) -> RunArtifacts:
    """Train on preprocessed samples; writes checkpoints, the log and a config echo to ``run_dir``."""
    if not train_samples:
        raise TrainingError("empty training split")
    _check_dims(arch, list(train_samples) + list(val_samples))
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model = build_model(arch, seed=config.seed)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    policy = config.policy if config.augment else AugmentPolicy.identity()

    echo = {"train": config.to_dict(), "arch": arch.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True, default=str), encoding="utf-8")

    n = len(train_samples)
    losses, val_dices, ckpts = [], [], []
    log_lines = ["epoch,train_loss,val_dice"]
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = order_rng.permutation(n)
        aug_seeds = np.random.SeedSequence([config.seed, 2, epoch]).generate_state(n)
        total, count = 0.0, 0
        for b in range(0, n, config.batch_size):
            idx = perm[b : b + config.batch_size]
            batch = [augment_sample(train_samples[i], policy, int(aug_seeds[i])) for i in idx]
            v, im = model_inputs(batch, arch, config.image_modality)
            target = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.float32))[:, None]
            opt.zero_grad()
            loss = dice_bce_loss(model(v, im), target)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        vd = mean_dice(model, val_samples, config.image_modality)
        losses.append(train_loss)
        val_dices.append(vd)
        log_lines.append(f"{epoch},{train_loss:.8g},{vd:.8g}")
        log.info("epoch %d loss %.4f val_dice %.4f", epoch, train_loss, vd)
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            path = save_checkpoint(model, ckpt_dir / f"epoch_{epoch:04d}.safetensors", epoch=epoch, val_dice=vd)
            ckpts.append(Checkpoint(path, epoch, vd))
    (run_dir / LOG_NAME).write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return RunArtifacts(run_dir, ckpts, losses, val_dices, echo)


def _rank_key(c: Checkpoint):
    vd = c.val_dice if c.val_dice == c.val_dice else -math.inf
    return (-vd, -c.epoch)


def select_top_checkpoints(checkpoints: Sequence[Checkpoint], k: int = 5) -> List[Checkpoint]:
    """The ``k`` checkpoints with the highest validation Dice; later epochs win ties."""
    return sorted(checkpoints, key=_rank_key)[:k]


def scan_checkpoints(run_dir) -> List[Checkpoint]:
    out = []
    for p in sorted((Path(run_dir) / "checkpoints").glob("*.safetensors")):
        _, _, meta = read_checkpoint(p)
        out.append(Checkpoint(p, int(meta["epoch"]), float(meta["val_dice"])))
    return out


class Ensemble:
    """Averages sigmoid outputs of several models sharing one architecture."""

    def __init__(self, models: Sequence[FusionNet], image_modality: str = "slo"):
        if not models:
            raise ValueError("ensemble needs at least one model")
        first = models[0].config.to_dict()
        for m in models[1:]:
            if m.config.to_dict() != first:
                raise ConfigError("ensemble members have different architectures")
        self.models = list(models)
        self.image_modality = image_modality

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[Checkpoint], arch: Optional[ArchitectureConfig] = None, image_modality: str = "slo"):
        return cls([load_checkpoint(c.path, expect=arch) for c in checkpoints], image_modality)

    @property
    def arch(self) -> ArchitectureConfig:
        return self.models[0].config

    def predict(self, samples: Sequence[StudySample]) -> List[np.ndarray]:
        acc = None
        for m in self.models:
            # float64 accumulation keeps the mean of identical members exact
            probs = [p.astype(np.float64) for p in predict(m, samples, self.image_modality)]
            acc = probs if acc is None else [a + p for a, p in zip(acc, probs)]
        return [(a / len(self.models)).astype(np.float32) for a in acc]


def predict_ensemble(checkpoints: Sequence[Checkpoint], arch: ArchitectureConfig, sample: StudySample, image_modality: str = "slo") -> np.ndarray:
    return Ensemble.from_checkpoints(checkpoints, arch, image_modality).predict([sample])[0]
