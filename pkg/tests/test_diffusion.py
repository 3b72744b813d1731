from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpillum.diffusion import (
    ScheduleError,
    SingularTimestepError,
    ancestral_sample,
    eps_from_score,
    forward_marginal,
    make_schedule,
    posterior_x0,
    reverse_step,
    score_from_eps,
    step_sigma,
)


def test_final_beta_one_zeroes_alpha_bar():
    s = make_schedule(1000, 1e-4, 1.0)
    assert s.alpha_bar(1000) == 0.0


def test_two_step_schedule():
    s = make_schedule(2, 0.5, 1.0)
    assert list(s.alpha_bars) == [0.5, 0.0]


def test_alpha_bar_matches_high_precision_product():
    getcontext().prec = 60
    s = make_schedule(1000, 1e-4, 0.02)
    acc = Decimal(1)
    for t in range(1000):
        beta = Decimal("1e-4") + Decimal(t) / Decimal(999) * (Decimal("0.02") - Decimal("1e-4"))
        acc *= Decimal(1) - beta
    assert s.alpha_bar(1000) == pytest.approx(float(acc), rel=1e-10)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 0.1, 1.5)])
def test_invalid_schedule(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


@given(st.integers(2, 2000), st.floats(1e-6, 0.5), st.floats(0.0, 1.0))
def test_schedule_invariants(T, b0, frac):
    b1 = b0 + frac * (1.0 - b0)
    s = make_schedule(T, b0, b1)
    assert np.all(np.diff(s.betas) >= 0) and s.betas[0] > 0 and s.betas[-1] <= 1
    if (b1 - b0) / (T - 1) > 4 * np.finfo(float).eps * b1:  # step resolvable in float64
        assert np.all(np.diff(s.betas) > 0)
    prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
    nz = s.alpha_bars > 0
    np.testing.assert_allclose(s.alpha_bars[nz], (prev * s.alphas)[nz], rtol=1e-12)
    pos = s.alpha_bars[s.alpha_bars > 0]
    assert np.all(np.diff(pos) < 0)


def test_forward_marginal_cases(rng):
    s = make_schedule()
    x0 = rng.standard_normal((4, 8, 3))
    eps = rng.standard_normal(x0.shape)
    np.testing.assert_array_equal(forward_marginal(s, x0, 10, np.zeros_like(x0)), np.sqrt(s.alpha_bar(10)) * x0)
    s1 = make_schedule(10, 0.1, 1.0)
    np.testing.assert_array_equal(forward_marginal(s1, x0, 10, eps), eps)
    t = 437
    out = forward_marginal(s, x0, t, eps)
    ab = s.alpha_bar(t)
    for idx in np.ndindex(x0.shape):
        assert out[idx] == pytest.approx(ab ** 0.5 * x0[idx] + (1 - ab) ** 0.5 * eps[idx], rel=1e-14, abs=1e-15)
    with pytest.raises(ValueError):
        forward_marginal(s, x0, t, eps[:, :4])
    with pytest.raises(ValueError):
        forward_marginal(s, x0, 0, eps)


@pytest.mark.parametrize("mode", ["beta", "tilde_beta"])
def test_reverse_step(rng, mode):
    s = make_schedule()
    x = rng.standard_normal((3, 5, 3))
    zero = np.zeros_like(x)
    t = 300
    np.testing.assert_allclose(reverse_step(s, x, zero, t, zero, mode), x / np.sqrt(s.alpha(t)), rtol=1e-15)
    x0 = rng.standard_normal(x.shape)
    eps = rng.standard_normal(x.shape)
    xt = forward_marginal(s, x0, t, eps)
    out = reverse_step(s, xt, eps, t, zero, mode)
    a, ab = s.alpha(t), s.alpha_bar(t)
    for idx in np.ndindex(x.shape):
        ref = (xt[idx] - (1 - a) / (1 - ab) ** 0.5 * eps[idx]) / a ** 0.5
        assert out[idx] == pytest.approx(ref, rel=1e-13, abs=1e-14)
    z = rng.standard_normal(x.shape)
    np.testing.assert_allclose(reverse_step(s, xt, eps, t, z, mode) - out, step_sigma(s, t, mode) * z, atol=1e-14)
    # noiseless last step
    np.testing.assert_allclose(reverse_step(s, xt, eps, 1, zero, mode),
                               (xt - s.beta(1) / np.sqrt(1 - s.alpha_bar(1)) * eps) / np.sqrt(s.alpha(1)),
                               rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        reverse_step(s, x, zero, 1001, zero, mode)


def test_sigma_modes():
    s = make_schedule()
    t = 200
    assert step_sigma(s, t, "beta") ** 2 == pytest.approx(s.beta(t))
    assert step_sigma(s, t, "tilde_beta") ** 2 == pytest.approx(
        s.beta(t) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)))
    assert step_sigma(s, 1, "tilde_beta") == 0.0
    with pytest.raises(ValueError):
        step_sigma(s, t, "learned")


def test_score_from_eps(rng):
    e = rng.standard_normal((2, 2, 3))
    np.testing.assert_array_equal(score_from_eps(np.zeros_like(e), 0.3), 0.0)
    np.testing.assert_array_equal(score_from_eps(e, 0.0), -e)
    np.testing.assert_allclose(eps_from_score(score_from_eps(e, 0.7), 0.7), e, rtol=1e-15)
    with pytest.raises(ZeroDivisionError):
        score_from_eps(e, 1.0)


def test_posterior_x0(rng):
    s = make_schedule()
    x0 = rng.standard_normal((4, 4, 3))
    eps = rng.standard_normal(x0.shape)
    for t in (1, 250, 999):
        xt = forward_marginal(s, x0, t, eps)
        np.testing.assert_allclose(posterior_x0(s, xt, score_from_eps(eps, s.alpha_bar(t)), t), x0, rtol=1e-10, atol=1e-10)
    t = 600
    np.testing.assert_allclose(posterior_x0(s, x0, np.zeros_like(x0), t), x0 / np.sqrt(s.alpha_bar(t)))
    sc = rng.standard_normal(x0.shape)
    out = posterior_x0(s, x0, sc, t)
    ab = s.alpha_bar(t)
    for idx in np.ndindex(x0.shape):
        assert out[idx] == pytest.approx((x0[idx] + (1 - ab) * sc[idx]) / ab ** 0.5, rel=1e-13)
    s1 = make_schedule(10, 0.1, 1.0)
    with pytest.raises(SingularTimestepError):
        posterior_x0(s1, x0, sc, 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 999), st.integers(0, 2**31 - 1))
def test_round_trip_property(t, seed):
    s = make_schedule()
    r = np.random.default_rng(seed)
    x0 = r.standard_normal((2, 3, 3)) * 3
    eps = r.standard_normal(x0.shape)
    xt = forward_marginal(s, x0, t, eps)
    rec = posterior_x0(s, xt, score_from_eps(eps, s.alpha_bar(t)), t)
    scale = np.abs(x0).max()
    np.testing.assert_allclose(rec, x0, rtol=1e-10, atol=1e-10 * scale * max(1.0, (1 / s.alpha_bar(t)) ** 0.5))


class _ZeroModel:
    shape = (2, 4, 3)

    def eps_predict(self, x, t):
        return np.zeros_like(x)


def test_ancestral_sample_deterministic():
    s = make_schedule(20)
    a = ancestral_sample(_ZeroModel(), s, (2, 4, 3), np.random.default_rng(5), rotate=True)
    b = ancestral_sample(_ZeroModel(), s, (2, 4, 3), np.random.default_rng(5), rotate=True)
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()
