import csv
import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest

from hetfuse import experiments as X
from hetfuse.datamodel import StudySample
from hetfuse.network import ArchitectureConfig
from hetfuse.preprocess import CutoutSpec, PreprocessConfig
from hetfuse.synthgen import SceneSpec
from hetfuse.training import TrainConfig

ARCH = ArchitectureConfig(levels=2, channel_schedule=(4, 8), enc_convs_per_block=2, dec_convs_per_block=2)


def _cfg(out, **kw):
    base = dict(
        out_dir=out,
        scene=SceneSpec(dims=(16, 32, 32), task="vessel", structure_scale=1.5, modality2d_exclusive_frac=0.3),
        n_patients=10,
        preprocess=PreprocessConfig(out_depth=16),
        arch=ARCH,
        train=TrainConfig(epochs=2, checkpoint_every=1, top_k=2),
        modes=("volume_only", "multiscale"),
        pcts=(1.0,),
        noise_levels=(0, 4),
        seeds=(0,),
    )
    base.update(kw)
    return X.ExperimentConfig(**base)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cardinality_and_pvalues(tmp_path):
    table = X.run_ablation(_cfg(tmp_path, pcts=(0.5, 1.0)))
    assert len(table.rows) == 2 * 2
    rows = _read(tmp_path / "report.csv")
    assert rows[0] == X.REPORT_HEADER and len(rows) == 5
    ms = [r for r in table.rows if r.mode == "multiscale"]
    assert all(r.p_vs_baseline is not None for r in ms)
    assert (tmp_path / "experiment.json").is_file()


def test_single_mode_has_no_pvalues(tmp_path):
    table = X.run_ablation(_cfg(tmp_path, modes=("volume_only",), seeds=(0, 1)))
    assert len(table.rows) == 2
    assert all(r[-1] == "" for r in _read(tmp_path / "report.csv")[1:])


def test_data_efficiency_nesting_and_trend(tmp_path):
    X.run_data_efficiency(_cfg(tmp_path, modes=("volume_only",), pcts=(0.2, 0.5, 1.0)))
    sets = [
        set((tmp_path / "cells" / f"volume_only_p{p:g}_s0" / "train_patients.txt").read_text().split())
        for p in (0.2, 0.5, 1.0)
    ]
    assert sets[0] <= sets[1] <= sets[2] and len(sets[2]) == 6
    assert "monotone=" in (tmp_path / "trend.txt").read_text()


def test_failed_cell_is_recorded(tmp_path):
    # a depth of 12 cannot pass through five levels of stride-2 downsampling
    bad = replace(ARCH, levels=5, channel_schedule=(2, 2, 2, 2, 2))
    cfg = _cfg(tmp_path, arch=bad, preprocess=PreprocessConfig(out_depth=12))
    table = X.run_ablation(cfg)
    assert all(r.failed for r in table.rows)
    assert "TrainingError" in (tmp_path / "failures.txt").read_text()
    assert len(_read(tmp_path / "report.csv")) == 3


def test_cell_rerun_reproduces_row(tmp_path):
    cfg = _cfg(tmp_path, modes=("multiscale",))
    data = X._prepare(cfg)
    a = X.run_cell(cfg, data, "multiscale", 1.0, 0)
    b = X.run_cell(cfg, data, "multiscale", 1.0, 0)
    assert a.csv_row() == b.csv_row()


def _toy_samples(n=3):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        m = np.zeros((8, 8), np.uint8)
        m[2 : 4 + i, 1:5] = 1
        out.append(StudySample(f"p{i}", "OD", rng.normal(size=(8, 8, 4)), {}, m))
    return out


def test_evaluate_oracle_and_constant_models():
    s = _toy_samples()
    ids = [x.patient_id for x in s]
    rep, _ = X.evaluate_samples(lambda b: [x.mask.astype(np.float32) for x in b], s, ids)
    assert rep.dice_mean == 1.0 and rep.hd95_mean == 0.0
    rep, _ = X.evaluate_samples(lambda b: [np.full(x.mask.shape, 0.5, np.float32) for x in b], s, ids)
    assert rep.auroc == 0.5
    with pytest.raises(X.ExperimentError):
        X.evaluate_samples(lambda b: b, [], [])


def test_corrupt_never_mutates():
    s = _toy_samples()
    before = [x.volume.copy() for x in s]
    out = X.corrupt(s, CutoutSpec(2, frac=(0.5, 0.5, 0.5)), 3)
    assert all(np.array_equal(b, x.volume) for b, x in zip(before, s))
    assert any(not np.array_equal(b, o.volume) for b, o in zip(before, out))
    assert X.corrupt(s, CutoutSpec(0), 3)[0] is s[0]


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_noise_sweep(tmp_path):
    cfg = _cfg(tmp_path)
    data = X._prepare(cfg)
    digest = _tree_digest(data.manifest.root)
    table = X.run_ablation(cfg, data)
    curves = X.run_noise_sweep(cfg, table, data)
    assert sorted({(m, n) for m, n, _ in curves.points}) == [(m, n) for m in sorted(cfg.modes) for n in (0, 4)]
    for r in table.rows:
        assert curves.points[(r.mode, 0, r.seed)] == r.report.aupr
    assert len(_read(tmp_path / "curves.csv")) == 1 + 4
    assert _read(tmp_path / "curves.csv")[0] == X.CURVES_HEADER
    assert _tree_digest(data.manifest.root) == digest


def test_noise_sweep_missing_checkpoints(tmp_path):
    cfg = _cfg(tmp_path)
    table = X.ReportTable([X.Row("volume_only", 1.0, 0, None, tmp_path / "nowhere")])
    with pytest.raises(X.ExperimentError, match="volume_only"):
        X.run_noise_sweep(cfg, table)


def test_superres_trains_on_half_slices(tmp_path, monkeypatch):
    seen = []
    real_train = X.train

    def spy(tcfg, arch, tr, va, out):
        seen.append((tr[0].volume.shape[0], tr[0].mask.shape[0], tr[0].images["slo"].shape[0]))
        return real_train(tcfg, arch, tr, va, out)

    monkeypatch.setattr(X, "train", spy)
    cfg = _cfg(tmp_path)
    table = X.run_superres(cfg)
    assert seen and all(s == (8, 8, 16) for s in seen)
    for r in table.rows:
        assert r.report.n_samples == 3
        assert 0.0 <= r.report.extra["exclusive_recall"] <= 1.0
    assert _read(tmp_path / "superres.csv")[0] == ["mode", "pct", "seed", "exclusive_recall"]


def test_exclusive_recall():
    p = [np.array([[0.9, 0.1], [0.6, 0.2]])]
    e = [np.array([[True, True], [False, False]])]
    assert X.exclusive_recall(p, e) == 0.5
    assert math.isnan(X.exclusive_recall(p, [None]))
