from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitchrl.data import Dataset, Outcome, Source, discounted_return
from stitchrl.stitch import (Sampler, Sampling, StitchConfig, Strategy, alpha_at, augment, boltzmann_probs,
                             boltzmann_sample, cosine_similarity, find_stitch_point, stitch)
from stitchrl.validity import support_scan

from conftest import make_traj


def brute_softmax(r, alpha, negate):
    z = [(-x if negate else x) / alpha for x in r]
    m = max(z)
    e = [np.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e])


def test_config_validation():
    with pytest.raises(ValueError):
        StitchConfig(delta=-1.0)
    with pytest.raises(ValueError):
        StitchConfig(M=0)
    with pytest.raises(ValueError):
        StitchConfig(alpha_start=0.0)
    with pytest.raises(ValueError):
        StitchConfig(max_attempts_per_stitch=0)
    assert StitchConfig(strategy="random").strategy is Strategy.RANDOM


def test_boltzmann_examples():
    p = boltzmann_probs([2.0, 0.0], 1.0)
    assert np.allclose(p, [np.e ** 2 / (np.e ** 2 + 1), 1 / (np.e ** 2 + 1)], atol=1e-12)
    assert abs(p[0] - 0.8808) < 1e-4
    assert np.allclose(boltzmann_probs([3.0, -7.0, 100.0], 1e9), 1 / 3, atol=1e-6)
    assert boltzmann_probs([5.0], 0.3)[0] == 1.0
    with pytest.raises(ValueError):
        boltzmann_probs([], 1.0)
    with pytest.raises(ValueError):
        boltzmann_probs([1.0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-200, 200), min_size=1, max_size=20), st.floats(0.05, 500), st.booleans())
def test_boltzmann_matches_brute_force(returns, alpha, negate):
    assert np.max(np.abs(boltzmann_probs(returns, alpha, negate) - brute_softmax(returns, alpha, negate))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.5, 20), st.floats(0.1, 10))
def test_boltzmann_homogeneity(returns, alpha, c):
    a = boltzmann_probs(returns, alpha)
    b = boltzmann_probs(np.array(returns) * c, alpha * c)
    assert np.allclose(a, b, atol=1e-12)


def test_uniform_sampling_frequencies():
    trajs = [make_traj(f"t{i}", [[float(i), 0.0], [1.0, float(i)]], [0, 1], [float(i), 0.0]) for i in range(5)]
    ds = Dataset(trajs, "h", 2, 2)
    sampler = Sampler(ds, StitchConfig(strategy=Strategy.RANDOM, sampling=Sampling.UNIFORM))
    rng = np.random.default_rng(0)
    n = 100_000
    counts = {}
    for _ in range(n):
        t = sampler._draw(ds, None, False, 1.0, rng)
        counts[t.id] = counts.get(t.id, 0) + 1
    p = 1 / 5
    sigma = np.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sigma for c in counts.values())


def test_boltzmann_sample_single():
    ds = Dataset([make_traj("only", [[1.0]], [0], [3.0])], "h", 1, 1)
    assert boltzmann_sample(ds, 1.0, False, np.random.default_rng(0)).id == "only"


def test_alpha_schedule():
    cfg = StitchConfig(M=3, alpha_start=1.0, alpha_end=5.0)
    assert alpha_at(1, cfg) == 1.0 and alpha_at(3, cfg) == 5.0 and alpha_at(2, cfg) == 3.0
    one = StitchConfig(M=1, alpha_start=2.0, alpha_end=9.0)
    assert alpha_at(1, one) == 2.0
    with pytest.raises(ValueError):
        alpha_at(4, cfg)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 1], [1, 0]) - 0.70711) < 1e-5


def _norm_ds(states_list):
    trajs = [make_traj(f"t{i}", s, [0] * len(s), [0.0] * len(s)) for i, s in enumerate(states_list)]
    return Dataset(trajs, "h", len(states_list[0][0]), 2)


def test_find_stitch_point_identical_state():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(5, 3))
    b[2] = a[3]
    ds = _norm_ds([a, b])
    pt = find_stitch_point(ds.trajectories[0], ds.trajectories[1], ds, StitchConfig())
    assert (pt.t, pt.t_prime) == (3, 2) and abs(pt.similarity - 1.0) < 1e-12


def test_find_stitch_point_tie_break():
    a = np.array([[9.0, 9.0], [1.0, 0.0], [0.0, 5.0], [1.0, 0.0], [9.0, 9.0]])
    b = np.array([[7.0, 7.0], [2.0, 0.0], [7.0, 7.0]])
    ds = Dataset([make_traj("a", a, [0] * 5, [0.0] * 5), make_traj("b", b, [0] * 3, [0.0] * 3)],
                 "h", 2, 1, norm_stats=_identity_stats(2))
    pt = find_stitch_point(ds.trajectories[0], ds.trajectories[1], ds, StitchConfig())
    assert (pt.t, pt.t_prime) == (1, 1)


def _identity_stats(d):
    from stitchrl.data import NormStats
    return NormStats(np.zeros(d), np.ones(d))


def test_find_stitch_point_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        ds = _norm_ds([a, b])
        pt = find_stitch_point(ds.trajectories[0], ds.trajectories[1], ds, StitchConfig())
        best = max(((cosine_similarity(ds.normalize(a[i])[0], ds.normalize(b[j])[0]), -i, -j)
                    for i in range(1, 4) for j in range(1, 4)))
        assert (pt.t, pt.t_prime) == (-best[1], -best[2])
        assert abs(pt.similarity - best[0]) < 1e-12


def test_find_stitch_point_too_short():
    ds = _norm_ds([np.ones((2, 2)), np.ones((5, 2))])
    assert find_stitch_point(ds.trajectories[0], ds.trajectories[1], ds, StitchConfig()) is None


def test_stitch_lengths_and_return():
    rng = np.random.default_rng(2)
    tb = make_traj("B", rng.normal(size=(3, 2)), [0, 1, 0], [1.0, 2.0, 3.0])
    ta = make_traj("A", rng.normal(size=(4, 2)), [1, 1, 0, 1], [10.0, 20.0, 30.0, 40.0], Outcome.REMISSION)
    s = stitch(ta, tb, 1, 1)
    assert len(s) == 4
    assert s.outcome is Outcome.REMISSION and s.source is Source.STITCHED
    assert s.stitch_meta["parents"] == ["A", "B"]
    assert discounted_return(s, 0.9) == pytest.approx(1 + 0.9 * 2 + 0.81 * 30 + 0.729 * 40, abs=1e-12)
    same = stitch(ta, ta, 2, 2)
    assert np.array_equal(same.states, ta.states) and np.array_equal(same.rewards, ta.rewards)


def test_augment_impossible_threshold(small_ds):
    with pytest.warns(RuntimeWarning):
        aug, rep = augment(small_ds, StitchConfig(delta=1.0 + 1e-9, M=5, max_attempts_per_stitch=3), 0)
    assert rep["produced"] == 0 and rep["misses"] == 5 and len(aug) == len(small_ds)


def test_augment_identical_states():
    trajs = [make_traj(f"t{i}", np.ones((4, 2)), [0, 1, 0, 1], [float(i)] * 4) for i in range(6)]
    ds = Dataset(trajs, "h", 2, 2)
    aug, rep = augment(ds, StitchConfig(M=10), 1)
    assert rep["produced"] == 10
    assert all(t.stitch_meta["similarity"] == 1.0 for t in aug.trajectories[6:])


def test_augment_support_and_determinism(small_ds):
    cfg = StitchConfig(M=40)
    a1, r1 = augment(small_ds, cfg, 3)
    a2, r2 = augment(small_ds, cfg, 3)
    assert [t.id for t in a1.trajectories] == [t.id for t in a2.trajectories]
    assert r1["produced"] == r2["produced"] > 0
    assert all(np.array_equal(x.states, y.states) for x, y in zip(a1.trajectories, a2.trajectories))
    scan = support_scan(a1, small_ds)
    assert scan["fraction"] == 1.0 and scan["junction_steps_matched"] == scan["junctions"]
    for t in a1.trajectories[len(small_ds):]:
        assert t.stitch_meta["similarity"] >= 0.95


@pytest.mark.parametrize("strategy", list(Strategy))
def test_strategies_produce_stitches(small_ds, strategy):
    _, rep = augment(small_ds, StitchConfig(M=8, strategy=strategy), 0)
    assert rep["strategy"] == strategy.value and rep["produced"] >= 1


def test_low_to_high_draws_suffix_from_high(small_ds):
    sampler = Sampler(small_ds, StitchConfig(M=10))
    rng = np.random.default_rng(0)
    high_ids = {t.id for t in sampler.high.trajectories}
    low_ids = {t.id for t in sampler.low.trajectories}
    for m in range(1, 11):
        a, b = sampler.draw_pair(m, rng)
        assert a.id in high_ids and b.id in low_ids
    swapped = Sampler(small_ds, dataclasses.replace(StitchConfig(M=10), strategy=Strategy.HIGH_TO_LOW))
    a, b = swapped.draw_pair(1, rng)
    assert a.id in low_ids and b.id in high_ids


def test_single_trajectory_dataset():
    ds = Dataset([make_traj("solo", np.random.default_rng(0).normal(size=(5, 2)), [0] * 5, [1.0] * 5)], "h", 2, 1)
    aug, rep = augment(ds, StitchConfig(M=2), 0)
    assert rep["produced"] == 2


def test_empty_dataset_rejected(small_ds):
    with pytest.raises(ValueError):
        augment(small_ds.view([]), StitchConfig(M=1), 0)
