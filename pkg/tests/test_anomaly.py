import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmpb.anomaly import (AnomalyStats, StreamDetector, calibrate, detect, prediction_errors, score,
                           stats_from_errors)
from dpmpb.envbench import Env, collect_random, collect_switch
from dpmpb.errors import ConfigError, DataError

import fixture_data as fx


def _unit_stats(k=2, threshold=3.0):
    I = np.eye(k)
    return AnomalyStats(np.zeros(k), I, I, 0.0, 1.0, threshold, 0.0)


def test_three_four_five():
    assert score(_unit_stats(), [3.0, 4.0]) == pytest.approx(5.0, rel=1e-15)


def test_error_at_mean_scores_zero():
    rng = np.random.default_rng(0)
    E = rng.standard_normal((200, 3)) @ rng.standard_normal((3, 3))
    st_ = stats_from_errors(E)
    assert score(st_, st_.mu) == 0.0


def test_threshold_is_strict():
    st_ = _unit_stats(threshold=5.0)
    assert detect(st_, [3.0, 4.0]).anomalous is False
    assert detect(st_, [3.0, 4.0001]).anomalous is True


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_distance_invariant_under_invertible_linear_maps(seed):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    M = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    if np.linalg.cond(L) > 10 or np.linalg.cond(M) > 10:
        return  # keep the eps regularizer negligible
    E = rng.standard_normal((400, 3)) @ L.T
    c = rng.standard_normal(3)
    e = rng.standard_normal(3)
    a = score(stats_from_errors(E), e)
    b = score(stats_from_errors(E @ M.T + c), M @ e + c)
    # only the eps regularizer (1e-6 of the mean variance) breaks exact invariance
    assert b == pytest.approx(a, rel=1e-3)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_gaussian_distance_mean_matches_chi_distribution(k):
    rng = np.random.default_rng(k)
    L = rng.standard_normal((k, k)) + 2 * np.eye(k)
    E = rng.standard_normal((10000, k)) @ L.T + rng.standard_normal(k)
    st_ = stats_from_errors(E)
    chi_mean = math.sqrt(2) * math.gamma((k + 1) / 2) / math.gamma(k / 2)
    chi_std = math.sqrt(k - chi_mean ** 2)
    assert st_.d_mean == pytest.approx(chi_mean, rel=0.02)
    assert st_.d_std == pytest.approx(chi_std, rel=0.05)
    assert st_.threshold == pytest.approx(st_.d_mean + 3 * st_.d_std, rel=1e-15)


def test_calibration_flag_rate_on_its_own_data():
    rng = np.random.default_rng(1)
    E = rng.standard_normal((5000, 2))
    st_ = stats_from_errors(E)
    assert np.mean(score(st_, E) > st_.threshold) <= 0.01


def test_few_samples_regularized_more():
    rng = np.random.default_rng(2)
    few = stats_from_errors(rng.standard_normal((2, 4)))
    many = stats_from_errors(rng.standard_normal((50, 4)))
    assert few.eps == pytest.approx(1e-3 * np.trace(few.cov) / 4)
    assert many.eps == pytest.approx(1e-6 * np.trace(many.cov) / 4)
    assert np.all(np.isfinite(few.cov_inv))
    with pytest.raises(DataError):
        stats_from_errors(np.zeros((0, 2)))


def test_score_dimension_check_and_json_round_trip():
    st_ = stats_from_errors(np.random.default_rng(3).standard_normal((50, 2)), ["pos", "vel"])
    with pytest.raises(ConfigError):
        score(st_, [1.0, 2.0, 3.0])
    back = AnomalyStats.from_json(st_.to_json())
    assert np.array_equal(back.cov_inv, st_.cov_inv) and back.signals == ("pos", "vel")
    assert back.threshold == st_.threshold


def test_per_signal_calibration():
    b = fx.tiny_bundles()[0]
    ds = fx.random_dataset([fx.A], 2, 60, 4)
    assert calibrate(b, ds).dim == 2
    pos = calibrate(b, ds, signals=["pos"])
    assert pos.dim == 1 and pos.signals == ("pos",)
    with pytest.raises(ConfigError):
        calibrate(b, ds, signals=["force"])


def test_stream_detector_matches_batch_scores():
    b = fx.tiny_bundles()[0]
    stats = calibrate(b, fx.random_dataset([fx.A], 2, 60, 4))
    ep = collect_random(Env(fx.B), 40, hold_steps=3, seed=11)
    batch = score(stats, prediction_errors(b, ep))
    det = StreamDetector(b, stats)
    out = [det.push(s, u) for s, u in zip(ep.s, ep.u)]
    assert out[0] is None
    np.testing.assert_allclose([o.d for o in out[1:]], batch, rtol=1e-12, atol=1e-12)
    assert [o.anomalous for o in out[1:]] == list(batch > stats.threshold)


def test_stream_window_averages():
    b = fx.tiny_bundles()[0]
    stats = calibrate(b, fx.random_dataset([fx.A], 2, 60, 4))
    ep = collect_random(Env(fx.A), 20, seed=12)
    raw = score(stats, prediction_errors(b, ep))
    det = StreamDetector(b, stats, window=3)
    out = [det.push(s, u) for s, u in zip(ep.s, ep.u)][1:]
    assert out[5].d == pytest.approx(raw[3:6].mean(), rel=1e-12)


def test_stream_detector_needs_stats():
    with pytest.raises(ConfigError):
        StreamDetector(fx.tiny_bundles()[0])


def test_distance_rises_after_dynamics_switch():
    b = fx.two_class_bundle()
    pb = b.pb_table.centroids()["A"]
    stats = calibrate(b, fx.random_dataset([fx.A], 4, 200, 2), pb=pb)
    ep = collect_switch(Env(fx.A), Env(fx.B), 150, 150, hold_steps=2, seed=13)
    d = score(stats, prediction_errors(b, ep, pb=pb))
    assert np.median(d[155:]) > np.median(d[:145])
