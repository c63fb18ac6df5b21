import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from layercache import calibration, core, medial
from layercache.builder import DISABLED_THRESHOLD
from layercache.calibration import AccuracyEffect, confusion_counts

from _fixtures import identity_backbone, identity_cache


def logit_md(logits, teacher_classes, layer="relu1", seed=0):
    """Medial data whose activations are the cache's logits (identity cache)."""
    n, c = logits.shape
    t = np.eye(c, dtype=np.float32)[teacher_classes]
    md = medial.MedialDataset(layer, logits, t, [f"s{i:05d}" for i in range(n)], "h")
    return medial.split(md, seed=seed)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 20.0))
def test_temperature_preserves_argmax(seed, tau):
    z = np.random.default_rng(seed).normal(0, 3, (50, 7)).astype(np.float32)
    assert_array_equal(np.argmax(core.softmax(z / np.float32(tau)), axis=1), np.argmax(z, axis=1))


def test_calibrated_logits_recover_unit_temperature():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 2.0, (6000, 10))
    p = core.softmax(z).astype(np.float64)
    y = np.array([rng.choice(10, p=row / row.sum()) for row in p])
    tau = calibration.fit_temperature(z, y)
    assert 0.8 <= tau <= 1.25
    assert calibration.nll(z, y, tau) <= calibration.nll(z, y, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fitted_temperature_never_worse_than_one(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, rng.uniform(0.2, 5), (80, 4))
    y = rng.integers(0, 4, 80)
    tau = calibration.fit_temperature(z, y)
    assert calibration.TAU_RANGE[0] <= tau <= calibration.TAU_RANGE[1]
    assert calibration.nll(z, y, tau) <= calibration.nll(z, y, 1.0)


def test_overconfident_logits_get_softened():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 1.0, (4000, 5))
    p = core.softmax(z).astype(np.float64)
    y = np.array([rng.choice(5, p=row / row.sum()) for row in p])
    assert calibration.fit_temperature(3 * z, y) == pytest.approx(3.0, rel=0.15)


def test_ece_well_calibrated_samples():
    rng = np.random.default_rng(2)
    conf = rng.uniform(0.1, 1.0, 20000)
    correct = rng.uniform(size=conf.size) < conf
    assert calibration.ece_from(conf, correct) < 0.02


@pytest.mark.parametrize("correct,expected", [([1, 1, 1, 1], 0.0), ([1, 0, 1, 0], 0.5)])
def test_ece_single_bin(correct, expected):
    assert calibration.ece_from(np.ones(4), np.array(correct)) == pytest.approx(expected)


def test_ece_uses_equal_width_bins():
    # two bins of 15 populated: (0.2 vs 0) and (0.9 vs 1)
    conf = np.array([0.2, 0.2, 0.9, 0.9])
    assert calibration.ece_from(conf, np.array([0, 0, 1, 1])) == pytest.approx((0.4 + 0.2) / 4)


@pytest.mark.parametrize("ordinal,budget", [(1, 0.01), (2, 0.005), (3, 0.0025)])
def test_budget(ordinal, budget):
    assert calibration.budget_for(0.02, ordinal) == pytest.approx(budget)


def test_bound_arithmetic():
    # 20 samples; 10 hit at theta 0.5 and 9 of them agree: HR 0.5, CA 0.9 -> 0.05
    conf = np.r_[np.full(10, 0.9), np.full(10, 0.2)]
    pred = np.zeros(20, int)
    ref = np.zeros(20, int)
    ref[0] = 1
    hr, ca, bound = calibration.threshold_curve(pred, conf, ref, grid=[0.5])
    assert (hr[0], ca[0]) == (0.5, 0.9)
    assert bound[0] == pytest.approx(0.05)
    assert bound[0] == pytest.approx(hr[0] * (1 - ca[0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_curve_properties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    conf = rng.uniform(0, 1, n)
    pred, ref = rng.integers(0, 3, n), rng.integers(0, 3, n)
    hr, ca, bound = calibration.threshold_curve(pred, conf, ref)
    assert all(a >= b for a, b in zip(hr, hr[1:]))
    assert all(a >= b - 1e-12 for a, b in zip(bound, bound[1:]))
    for h, c, b in zip(hr, ca, bound):
        assert b == pytest.approx(h * (1 - c), abs=1e-12)


def test_perfect_cache_gets_zero_threshold():
    g = identity_backbone()
    z = np.random.default_rng(3).normal(0, 1, (300, 10)).astype(np.float32)
    md = logit_md(z, np.argmax(z, axis=1))
    rep = calibration.assign_threshold(identity_cache(g), md, 0.02)
    assert rep.threshold == 0.0
    assert max(rep.bound) == 0.0


def test_assigned_threshold_is_smallest_within_budget():
    g = identity_backbone()
    rng = np.random.default_rng(4)
    z = rng.normal(0, 2, (1000, 10)).astype(np.float32)
    teacher = np.where(rng.uniform(size=1000) < 0.8, np.argmax(z, axis=1), rng.integers(0, 10, 1000))
    rep = calibration.assign_threshold(identity_cache(g), logit_md(z, teacher), 0.02, ordinal=1)
    i = rep.grid.index(rep.threshold)
    assert rep.bound[i] <= rep.budget == 0.01
    assert all(b > rep.budget for b in rep.bound[:i])
    assert rep.n_samples == 200
    assert "theta" in rep.to_text() and len(rep.rows()) == 101


def test_hopeless_cache_is_disabled():
    g = identity_backbone()
    z = np.zeros((100, 10), np.float32)
    z[:, 0] = 50.0      # always class 0 with confidence 1.0
    rep = calibration.assign_threshold(identity_cache(g), logit_md(z, np.full(100, 3)), 0.02)
    assert rep.threshold == DISABLED_THRESHOLD and rep.disabled


def test_assign_threshold_validates_input():
    g = identity_backbone()
    md = logit_md(np.zeros((10, 10), np.float32), np.zeros(10, int))
    with pytest.raises(ValueError):
        calibration.assign_threshold(identity_cache(g), md, 1.5)


def test_calibrate_temperature_keeps_predictions():
    g = identity_backbone()
    rng = np.random.default_rng(5)
    z = rng.normal(0, 4, (500, 10)).astype(np.float32)
    teacher = np.where(rng.uniform(size=500) < 0.6, np.argmax(z, axis=1), rng.integers(0, 10, 500))
    md = logit_md(z, teacher)
    cache = identity_cache(g)
    before = cache.predict(md.activations)[0]
    cache.temperature = calibration.calibrate_temperature(cache, md)
    assert cache.temperature > 1.0  # overconfident logits get softened
    assert_array_equal(cache.predict(md.activations)[0], before)


# -- accuracy effect ----------------------------------------------------------


def test_effect_identical_cache():
    b = np.arange(20) % 4
    labels = np.where(np.arange(20) % 3 == 0, (b + 1) % 4, b)
    counts = confusion_counts(b, b, labels, np.ones(20, bool))
    assert counts["B_notC"] == counts["notB_C"] == 0
    assert AccuracyEffect(counts, 20, 20).effect == 0


def test_effect_constructed_set():
    n = 100
    labels = np.zeros(n, int)
    backbone = np.zeros(n, int)
    cache = np.zeros(n, int)
    backbone[:3] = 1          # backbone wrong, cache right: fixes
    cache[3] = 2              # backbone right, cache wrong: breaks
    hit = np.zeros(n, bool)
    hit[:10] = True
    counts = confusion_counts(cache, backbone, labels, hit)
    assert counts == {"BC": 6, "BC_wrong": 0, "B_notC": 1, "notB_C": 3, "notB_notC": 0}
    assert AccuracyEffect(counts, 10, n).effect == pytest.approx(0.02)


def test_effect_disabled_threshold():
    g = identity_backbone()
    z = np.random.default_rng(6).normal(0, 1, (100, 10)).astype(np.float32)
    md = logit_md(z, np.argmax(z, axis=1))
    cache = identity_cache(g, threshold=DISABLED_THRESHOLD)
    labels = dict(zip(md.sample_ids, np.zeros(100, int)))
    eff = calibration.actual_accuracy_effect(cache, md, labels)
    assert eff.hits == 0 and eff.effect == 0 and sum(eff.counts.values()) == 0


def test_effect_matches_accuracy_difference():
    """The effect equals cache-enabled minus backbone accuracy on the split."""
    g = identity_backbone()
    rng = np.random.default_rng(7)
    z = rng.normal(0, 2, (400, 10)).astype(np.float32)
    teacher = np.where(rng.uniform(size=400) < 0.7, np.argmax(z, axis=1), rng.integers(0, 10, 400))
    labels = np.where(rng.uniform(size=400) < 0.7, teacher, rng.integers(0, 10, 400))
    md = logit_md(z, teacher)
    cache = identity_cache(g, threshold=0.3)
    _, _, ids = md.part("test")
    idx = [int(s[1:]) for s in ids]
    eff = calibration.actual_accuracy_effect(cache, md, labels[idx])
    pred, conf = cache.predict(z[idx])
    final = np.where(conf >= 0.3, pred, teacher[idx])
    expect = np.mean(final == labels[idx]) - np.mean(teacher[idx] == labels[idx])
    assert eff.effect == pytest.approx(expect)
