import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from droploss.categories import from_counts
from droploss.diagnostics import (
    GradientLedger, ParetoPoint, bg_origin_fraction, bg_score_profile, drop_rate_audit, frequency_rank,
    median_by_bin, on_front_flags, origin_masks, pareto_front, tail_keep_by_presence, write_pareto,
)
from droploss.losses import LogitsBatch, WeightRule, sigmoid, weighted_bce
from droploss.model import TrainSchedule, init_params, train
from droploss.synth import SynthConfig, generate_pool


def brute_front(xy):
    """O(n^2) oracle: indices of points no other point dominates."""
    keep = []
    for i, a in enumerate(xy):
        dominated = any(b[0] >= a[0] and b[1] >= a[1] and (b[0] > a[0] or b[1] > a[1]) for b in xy)
        if not dominated:
            keep.append(i)
    return keep


def test_ledger_all_background_batch():
    led = GradientLedger(3)
    led.account([-1, -1], np.array([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]]))
    assert not led.encouraging.any() and not led.fg_discouraging.any()
    np.testing.assert_allclose(led.bg_discouraging, [0.5, 0.7, 0.9])


def test_ledger_zero_weights_unchanged():
    b = LogitsBatch(np.random.default_rng(0).normal(size=(4, 3)), [0, -1, 2, 1])
    _, g = weighted_bce(b, np.zeros((4, 3)))
    led = GradientLedger(3)
    led.account(b.labels, g)
    assert not led.sums.any()


def test_ledger_hand_built_two_by_two():
    z = np.array([[0.0, np.log(3)], [np.log(3), 0.0]])
    labels = [0, -1]
    _, g = weighted_bce(LogitsBatch(z, labels), np.ones((2, 2)))
    led = GradientLedger(2)
    led.account(labels, g)
    # sigma = [[0.5, 0.75], [0.75, 0.5]]; grad = (sigma - y) / 2
    np.testing.assert_allclose(led.encouraging, [0.25, 0.0], atol=1e-15)
    np.testing.assert_allclose(led.fg_discouraging, [0.0, 0.375], atol=1e-15)
    np.testing.assert_allclose(led.bg_discouraging, [0.375, 0.25], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 9))
def test_ledger_partition_exact(seed, n, c):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, c, size=n)
    grad = rng.normal(size=(n, c))
    enc, bg, wrong = origin_masks(labels, c)
    assert ((enc.astype(int) + bg + wrong) == 1).all()
    delta = GradientLedger(c).account(labels, grad)
    # same cell sets summed independently
    mag = np.abs(grad)
    for d, m in zip(delta, (enc, bg, wrong)):
        np.testing.assert_allclose(d, (mag * m).sum(axis=0), rtol=1e-12, atol=0)
    assert delta.sum() == pytest.approx(mag.sum(), rel=1e-12)
    assert (delta >= 0).all()


def test_ledger_csv_roundtrip(tmp_path):
    led = GradientLedger(4)
    led.account([0, -1, 3], np.random.default_rng(0).normal(size=(3, 4)))
    led.to_csv(tmp_path / "l.csv")
    np.testing.assert_array_equal(GradientLedger.from_csv(tmp_path / "l.csv").sums, led.sums)


def test_bg_origin_fraction_examples():
    led = GradientLedger(3)
    led.sums[1] = [3.0, 0.0, 0.0]
    led.sums[2] = [1.0, 2.0, 0.0]
    frac = bg_origin_fraction(led)
    assert frac[0] == 0.75 and frac[1] == 0.0 and np.isnan(frac[2])


def test_median_by_bin_ignores_absent():
    table = from_counts([500, 40, 5, 3])
    m = median_by_bin(np.array([0.1, 0.2, np.nan, 0.6]), table)
    assert m == {"rare": 0.6, "common": 0.2, "frequent": 0.1}


def test_bg_score_profile_zero_params():
    p = init_params(5, 4, 0, np.random.default_rng(0))
    for a in p.arrays.values():
        a[...] = 0
    prof = bg_score_profile(p, np.random.default_rng(1).normal(size=(1000, 5)))
    np.testing.assert_array_equal(prof, 0.5)
    with pytest.raises(ValueError):
        bg_score_profile(p, np.zeros((999, 5)))


def test_frequency_rank():
    assert list(frequency_rank(from_counts([5, 500, 40, 40]))) == [3, 0, 1, 2]


def test_pareto_examples():
    assert pareto_front([(0.4, 0.4)]) == [(0.4, 0.4)]
    assert pareto_front([(0.2, 0.8), (0.3, 0.9)]) == [(0.3, 0.9)]
    assert pareto_front([(0.3, 0.9), (0.3, 0.9), (0.1, 0.2)]) == [(0.3, 0.9), (0.3, 0.9)]
    assert pareto_front([]) == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=50))
def test_pareto_matches_brute_force(raw):
    xy = [(a / 6, b / 6) for a, b in raw]
    pts = [ParetoPoint("x", float(i), t, h, 0.0) for i, (t, h) in enumerate(xy)]
    got = sorted(int(p.param) for p in pareto_front(pts))
    assert got == brute_front(xy)
    front = [xy[i] for i in got]
    for a, b in itertools.permutations(front, 2):
        assert not (a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1]))


def test_on_front_flags_and_csv(tmp_path):
    pts = [ParetoPoint("beql", 2.0, 0.4, 0.6, 0.5), ParetoPoint("eql", None, 0.2, 0.9, 0.5),
           ParetoPoint("fixed_drop", 0.5, 0.1, 0.5, 0.3),
           ParetoPoint("beql", 3.0, float("nan"), float("nan"), float("nan"), 0, "failed: boom")]
    assert on_front_flags(pts[:3]) == [True, True, False]
    write_pareto(tmp_path / "p.csv", pts)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "family,param,seed_count,tail,head,overall,on_front,status"
    assert lines[2].startswith("eql,,1,")
    assert lines[4].endswith(",0,failed: boom")


@pytest.fixture(scope="module")
def drop_logs():
    cfg = SynthConfig(num_categories=15, feature_dim=8, dataset_size=12000, seed=2)
    pool = generate_pool(cfg)
    sched = TrainSchedule(iterations=1000, batch_size=64, log_every=500)
    out = {}
    for name, kw in (("droploss", {}), ("fixed_drop", {"keep_prob": 1.0})):
        out[name] = train(pool, pool.table, WeightRule(name, **kw), sched, 0)[1]
    return out


def test_drop_audit_keep_one_exact(drop_logs):
    for a in drop_rate_audit(drop_logs["fixed_drop"]):
        assert a.empirical == 1.0 and not a.flagged


def test_drop_audit_droploss_within_tolerance(drop_logs):
    audits = drop_rate_audit(drop_logs["droploss"])
    assert {a.bin for a in audits} == {"rare", "common", "freq"}
    for a in audits:
        assert a.cells >= 10_000
        assert a.deviation <= 0.02 and not a.flagged


def test_drop_audit_empty_for_deterministic_rules():
    from droploss.model import TrainLog
    assert drop_rate_audit(TrainLog("bce", 0)) == []


def test_tail_keep_higher_with_rare_present(drop_logs):
    with_rare, without = tail_keep_by_presence(drop_logs["droploss"])
    assert with_rare > without
