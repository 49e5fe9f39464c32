"""Segmentation loss, evaluation metrics and the paired significance test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import binary_erosion, distance_transform_edt
from scipy.special import ndtr
from scipy.stats import rankdata

DICE_SMOOTH = 1e-5
BCE_CLAMP = 1e-7
THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    pass


def dice_bce_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss over the whole batch plus mean binary cross-entropy."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    dice = 1 - (2 * inter + smooth) / (pred.sum() + target.sum() + smooth)
    p = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    bce = F.binary_cross_entropy(p, target)
    return dice + bce


def dice_score(pred_bin: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(pred_bin, dtype=bool)
    g = np.asarray(target, dtype=bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or touching the image edge."""
    m = np.asarray(mask, dtype=bool)
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return m & ~binary_erosion(m, structure=cross, border_value=0)


def hd95(pred_bin: np.ndarray, target: np.ndarray, spacing=(1.0, 1.0)) -> float:
    p = np.asarray(pred_bin, dtype=bool)
    g = np.asarray(target, dtype=bool)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        H, W = p.shape
        return float(math.hypot((H - 1) * spacing[0], (W - 1) * spacing[1]))
    bp, bg = boundary(p), boundary(g)
    to_g = distance_transform_edt(~bg, sampling=spacing)
    to_p = distance_transform_edt(~bp, sampling=spacing)
    dists = np.concatenate([to_g[bp], to_p[bg]])
    return float(np.percentile(dists, 95))


def _check_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    s, y = _check_scores(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision with tied scores treated as one threshold."""
    s, y = _check_scores(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def _exact_signed_rank_counts(ranks2: np.ndarray) -> np.ndarray:
    """Number of sign assignments producing each value of 2*T+ (ranks doubled to integers)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = 20) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples ``a`` and ``b``.

    Zero differences are discarded. Up to ``exact_max_n`` remaining pairs the
    null distribution is enumerated exactly (mid-ranks included); beyond that a
    tie-corrected normal approximation is used.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired scores must be 1-D")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    t_plus = ranks[d > 0].sum()
    if n <= exact_max_n:
        ranks2 = np.rint(2 * ranks).astype(int)
        counts = _exact_signed_rank_counts(ranks2)
        probs = counts / counts.sum()
        t2 = int(round(2 * t_plus))
        p_lo = probs[: t2 + 1].sum()
        p_hi = probs[t2:].sum()
        return float(min(1.0, 2 * min(p_lo, p_hi)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = (t_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2 * ndtr(-abs(z))))


@dataclass
class PairedScores:
    ids: List[str]
    a: List[float]
    b: List[float]

    def __post_init__(self):
        if not len(self.ids) == len(self.a) == len(self.b):
            raise ValueError("paired score lists must have equal length")

    @classmethod
    def align(cls, a: Dict[str, float], b: Dict[str, float]) -> "PairedScores":
        ids = sorted(set(a) & set(b))
        return cls(ids, [a[i] for i in ids], [b[i] for i in ids])

    def p_value(self) -> float:
        return wilcoxon_signed_rank(self.a, self.b)


REPORT_KEYS = ("n_samples", "dice_mean", "dice_std", "hd95_mean", "hd95_std", "auroc", "aupr")


@dataclass
class MetricsReport:
    ids: List[str]
    dice: List[float]
    hd95: List[float]
    auroc: float
    aupr: float
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.dice)

    @property
    def dice_mean(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def dice_std(self) -> float:
        return float(np.std(self.dice)) if self.dice else float("nan")

    @property
    def hd95_mean(self) -> float:
        return float(np.mean(self.hd95)) if self.hd95 else float("nan")

    @property
    def hd95_std(self) -> float:
        return float(np.std(self.hd95)) if self.hd95 else float("nan")

    def per_sample_dice(self) -> Dict[str, float]:
        return dict(zip(self.ids, self.dice))

    def to_text(self) -> str:
        """Flat ``key=value`` record; per-sample values as ``dice.<id>``/``hd95.<id>``."""
        lines = [f"{k}={getattr(self, k)!r}" for k in REPORT_KEYS]
        lines += [f"{k}={v!r}" for k, v in sorted(self.extra.items())]
        lines += [f"dice.{i}={v!r}" for i, v in zip(self.ids, self.dice)]
        lines += [f"hd95.{i}={v!r}" for i, v in zip(self.ids, self.hd95)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        ids = [k[5:] for k in kv if k.startswith("dice.")]
        extra = {
            k: float(v) for k, v in kv.items()
            if k not in REPORT_KEYS and not k.startswith(("dice.", "hd95."))
        }
        return cls(
            ids=ids,
            dice=[float(kv[f"dice.{i}"]) for i in ids],
            hd95=[float(kv[f"hd95.{i}"]) for i in ids],
            auroc=float(kv["auroc"]),
            aupr=float(kv["aupr"]),
            extra=extra,
        )


def _safe(fn, scores, labels):
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def compute_report(
    ids: Sequence[str],
    probs: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    spacings: Sequence[Sequence[float]],
    pooled: bool = True,
    threshold: float = THRESHOLD,
) -> MetricsReport:
    """Per-sample Dice/HD95 at ``threshold``; AUROC/AUPR over pooled pixels
    (or averaged per sample when ``pooled`` is False)."""
    dice, hd = [], []
    for p, m, sp in zip(probs, masks, spacings):
        b = p >= threshold
        dice.append(dice_score(b, m))
        hd.append(hd95(b, m, tuple(sp[:2])))
    if pooled:
        s = np.concatenate([np.ravel(p) for p in probs])
        y = np.concatenate([np.ravel(m) for m in masks])
        roc, pr = _safe(auroc, s, y), _safe(aupr, s, y)
    else:
        roc = float(np.nanmean([_safe(auroc, p, m) for p, m in zip(probs, masks)]))
        pr = float(np.nanmean([_safe(aupr, p, m) for p, m in zip(probs, masks)]))
    return MetricsReport(list(ids), dice, hd, roc, pr)
