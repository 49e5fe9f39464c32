import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from hetfuse.metrics import (
    MetricsReport,
    PairedScores,
    UndefinedMetricError,
    aupr,
    auroc,
    compute_report,
    dice_bce_loss,
    dice_score,
    hd95,
    wilcoxon_signed_rank,
)


def test_loss_near_perfect():
    t = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    p = t.clamp(1e-6, 1 - 1e-6)
    assert dice_bce_loss(p, t) < 0.01


def test_loss_closed_form():
    p = torch.full((2, 2), 0.5)
    t = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    eps = 1e-5
    expected = 1 - (2 * 1 + eps) / (2 + 2 + eps) + math.log(2)
    assert float(dice_bce_loss(p, t)) == pytest.approx(expected, abs=1e-6)


def test_loss_matches_direct_formula():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, (4, 4))
    g = (rng.random((4, 4)) > 0.5).astype(float)
    eps = 1e-5
    dice = 1 - (2 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps)
    bce = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
    got = float(dice_bce_loss(torch.tensor(p), torch.tensor(g)))
    assert got == pytest.approx(dice + bce, abs=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(1)
    g = torch.tensor((rng.random((4, 4)) > 0.5).astype(np.float64))
    for _ in range(5):
        p = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
        dice_bce_loss(p, g).backward()
        d = torch.tensor(rng.normal(size=(4, 4)))
        f = lambda x: float(dice_bce_loss(x, g))
        fd = oracles.central_difference(f, p.detach(), d, 1e-6)
        an = float((p.grad * d).sum())
        assert abs(fd - an) / max(abs(an), 1e-12) < 1e-4


def test_dice_examples():
    a = np.array([[1, 1, 0, 0]])
    assert dice_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(np.array([[1, 1, 0]]), np.array([[0, 1, 1]])) == 0.5
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_hd95_examples():
    m = np.zeros((10, 10), int)
    m[2:5, 3:7] = 1
    assert hd95(m, m) == 0.0
    p = np.zeros((5, 8), int)
    g = np.zeros((5, 8), int)
    p[2, 1] = 1
    g[2, 4] = 1
    assert hd95(p, g) == pytest.approx(oracles.hd95(p, g)) == pytest.approx(3.0)
    assert hd95(np.zeros((10, 10)), m) == pytest.approx(math.sqrt(81 + 81))
    assert hd95(np.zeros((10, 10)), np.zeros((10, 10))) == 0.0


def test_hd95_anisotropic_spacing():
    p = np.zeros((6, 6), int)
    g = np.zeros((6, 6), int)
    p[1, 1] = 1
    g[4, 1] = 1
    assert hd95(p, g, (0.5, 2.0)) == pytest.approx(1.5)


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    s, y = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
    assert auroc(s, y) == pytest.approx(0.75) == pytest.approx(oracles.auroc(s, y))
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_aupr_examples():
    assert aupr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert aupr([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx(5 / 6)
    assert aupr([0.4] * 5, [1, 0, 0, 1, 0]) == pytest.approx(0.4)
    with pytest.raises(UndefinedMetricError):
        aupr([0.1, 0.2], [0, 0])


def test_wilcoxon_examples():
    a = [0.5, 0.7, 0.2]
    assert wilcoxon_signed_rank(a, a) == 1.0
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    y = [0.9, 1.8, 2.7, 3.6, 4.5]
    assert wilcoxon_signed_rank(x, y) == pytest.approx(0.0625)
    assert wilcoxon_signed_rank(y, x) == wilcoxon_signed_rank(x, y)


def test_wilcoxon_normal_branch_matches_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(3)
    a = rng.normal(size=40)
    b = a + rng.normal(0.3, 1.0, size=40)
    b[:3] = a[:3]
    ours = wilcoxon_signed_rank(a, b)
    ref = wilcoxon(a, b, method="approx", zero_method="wilcox", correction=False).pvalue
    assert ours == pytest.approx(ref, rel=1e-9)


def test_paired_scores_alignment():
    ps = PairedScores.align({"b": 0.2, "a": 0.1, "c": 0.5}, {"a": 0.3, "b": 0.4})
    assert ps.ids == ["a", "b"] and ps.a == [0.1, 0.2] and ps.b == [0.3, 0.4]
    with pytest.raises(ValueError):
        PairedScores(["a"], [1.0, 2.0], [1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_dice_hd95_symmetry(h, w, seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((h, w)) > 0.6, rng.random((h, w)) > 0.6
    assert dice_score(p, g) == dice_score(g, p)
    assert hd95(p, g) == pytest.approx(hd95(g, p), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=2, max_size=64), st.integers(0, 2**31 - 1))
def test_rank_metrics_invariant_to_monotone_transform(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(len(scores)) > 0.5
    labels[0], labels[1] = True, False
    s = np.array(scores) / 100.0
    t = np.exp(s) * 3 + 1
    assert auroc(s, labels) == pytest.approx(auroc(t, labels), abs=1e-12)
    assert aupr(s, labels) == pytest.approx(aupr(t, labels), abs=1e-12)


def test_perfect_prediction_report():
    rng = np.random.default_rng(0)
    masks = [(rng.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(3)]
    probs = [m.astype(np.float32) for m in masks]
    r = compute_report(["a", "b", "c"], probs, masks, [(1, 1, 1)] * 3)
    assert (r.dice_mean, r.hd95_mean, r.auroc, r.aupr) == (1.0, 0.0, 1.0, 1.0)


def test_report_text_roundtrip():
    r = MetricsReport(["x", "y"], [0.5, 0.75], [1.0, 2.5], 0.9, 0.8, {"exclusive_recall": 0.3})
    back = MetricsReport.from_text(r.to_text())
    assert back.ids == r.ids and back.dice == r.dice and back.hd95 == r.hd95
    assert (back.auroc, back.aupr, back.extra) == (0.9, 0.8, {"exclusive_recall": 0.3})
    assert "dice_mean=0.625" in r.to_text()


def test_per_sample_auc_flag():
    masks = [np.array([[1, 0]]), np.array([[0, 1]])]
    probs = [np.array([[0.9, 0.8]]), np.array([[0.2, 0.3]])]
    r = compute_report(["a", "b"], probs, masks, [(1, 1, 1)] * 2, pooled=False)
    assert r.auroc == 1.0
    pooled = compute_report(["a", "b"], probs, masks, [(1, 1, 1)] * 2)
    assert pooled.auroc == pytest.approx(0.75)
