import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from icczone.acoustics import Geometry, default_geometry
from icczone.ctf import UNBOUNDED, ctf_convolve
from icczone.estimator import (
    EstimatorState, FeedbackEstimator, build_model, estimate_feedback, limit_gain,
)


@pytest.fixture(scope="module")
def fitted():
    return FeedbackEstimator(default_geometry(), alpha_db=0.0, forward_gain=0.3).fit()


def noise_spec(seed, frames=60, bands=129):
    r = np.random.default_rng(seed)
    return r.standard_normal((bands, frames)) + 1j * r.standard_normal((bands, frames))


def test_limit_gain_examples():
    assert limit_gain(1.0, 0.9, 0.2) == pytest.approx(0.7)
    assert limit_gain(0.5, 10.0, 0.2) == pytest.approx(0.5)
    assert limit_gain(1.0, 0.1, 0.2) == 0.0
    assert limit_gain(2.0, UNBOUNDED, 0.2) == 2.0


def test_alpha_zero_gives_zero_estimate():
    est = FeedbackEstimator(default_geometry(), alpha_db=-math.inf).fit()
    assert not np.any(est.transform(noise_spec(0)))
    per_band = np.full(129, -math.inf)
    est = FeedbackEstimator(default_geometry(), alpha_db=per_band).fit()
    assert not np.any(est.transform(noise_spec(1)))


def test_first_lag_and_causality_of_impulse(fitted):
    lag = fitted.first_feedforward_lag()
    assert lag >= 2
    Y0 = np.zeros((129, 20), complex)
    Y0[:, 0] = 1.0
    out = fitted.transform(Y0)
    assert not np.any(out[..., :lag])
    assert np.any(out[..., lag])


def test_first_lag_delay_arithmetic(geometry):
    est = FeedbackEstimator(geometry, 0.0).fit()
    d = 360 + geometry.propagation_delays(24000.0).min()
    # a delay of d samples first overlaps the input frame (d - N) / R frames back
    assert est.first_feedforward_lag() == (d - 256) // 128 + 1 >= 2


def test_lambda_one_is_pure_feed_forward(geometry):
    est = FeedbackEstimator(geometry, alpha_db=2.0, lam=1.0, forward_gain=0.3).fit()
    m = est.model_
    assert not np.any(m.h_r.taps) and not np.any(m.ctf_r.coeffs)
    assert np.all(np.isinf(m.profile.alpha_max))
    np.testing.assert_array_equal(m.alpha_r, m.alpha)
    Y0 = noise_spec(3)
    out = est.transform(Y0)
    for ch in range(m.n_mics):
        ref = ctf_convolve(m.ctf_f.channel(ch).scaled(m.alpha), Y0)
        np.testing.assert_allclose(out[ch], ref, atol=1e-10)


def test_lambda_zero_uses_model_path(geometry):
    m = build_model(geometry, lam=0.0, forward_gain=0.3)
    np.testing.assert_array_equal(m.h_r.taps, m.h_f[0].taps)
    assert m.ctf_f.lag_start >= 1 and m.ctf_r.strictly_causal


def test_recursive_gain_respects_border(geometry):
    m = build_model(geometry, alpha_db=20.0, forward_gain=1.0)
    finite = np.isfinite(m.profile.alpha_max)
    assert np.all(m.alpha_r[finite] <= m.profile.alpha_max[finite] - m.delta + 1e-12)
    assert np.all(m.alpha_r >= 0)


def test_band_mismatch(fitted):
    with pytest.raises(ValueError, match="band mismatch"):
        fitted.transform(np.zeros((100, 5), complex))
    with pytest.raises(ValueError, match="band mismatch"):
        estimate_feedback(fitted.model_, EstimatorState(fitted.model_), np.zeros(7))


def test_cross_term_warning():
    g = default_geometry()
    close = Geometry(g.mic_positions, g.mic_positions[:2] + [0.0, 0.0, 0.01], g.zone_source_positions)
    with pytest.warns(UserWarning, match="cross-term condition violated"):
        build_model(close, tau_icc=0.0)


def test_linearity(fitted):
    Y0 = noise_spec(4)
    np.testing.assert_allclose(fitted.transform(2.5 * Y0), 2.5 * fitted.transform(Y0), atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), frame=st.integers(0, 39))
def test_strict_causality(seed, frame):
    est = FeedbackEstimator(default_geometry(), alpha_db=1.0, forward_gain=0.3).fit()
    Y0 = noise_spec(seed, frames=40)
    changed = Y0.copy()
    changed[:, frame] += 10.0
    a, b = est.transform(Y0), est.transform(changed)
    np.testing.assert_array_equal(a[..., :frame + 1], b[..., :frame + 1])


def test_bounded_output_at_high_gain(geometry):
    est = FeedbackEstimator(geometry, alpha_db=15.0, forward_gain=1.0).fit()
    out = est.transform(noise_spec(6, frames=800))
    q = out.shape[-1] // 4
    late = np.sqrt(np.mean(np.abs(out[..., 3 * q:]) ** 2, axis=-1))
    mid = np.sqrt(np.mean(np.abs(out[..., q:2 * q]) ** 2, axis=-1))
    assert np.all(late <= 2 * mid)


def test_sklearn_api(geometry):
    est = FeedbackEstimator(geometry, alpha_db=-3.0, lam=0.5)
    assert est.get_params()["lam"] == 0.5
    twin = clone(est).set_params(alpha_db=1.0)
    assert twin.alpha_db == 1.0 and est.alpha_db == -3.0
    with pytest.raises(Exception):
        est.transform(noise_spec(0))
    assert est.fit().alpha_r_max_.shape == (129,)


def test_streaming_matches_batch(fitted):
    Y0 = noise_spec(8, frames=25)
    state = EstimatorState(fitted.model_)
    frames = np.stack([estimate_feedback(fitted.model_, state, Y0[:, l]) for l in range(25)], -1)
    np.testing.assert_allclose(frames, fitted.transform(Y0))
