import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ddprism.sde import (
    DomainError,
    NoiseSchedule,
    TimeSampler,
    diffuse,
    score_from_denoiser,
    sigma_of_t,
)

SCHED = NoiseSchedule(1e-3, 10.0)


def test_sigma_endpoints_and_midpoint():
    assert sigma_of_t(SCHED, 0.0) == pytest.approx(1e-3, rel=1e-14)
    assert sigma_of_t(SCHED, 1.0) == pytest.approx(10.0, rel=1e-14)
    assert sigma_of_t(SCHED, 0.5) == pytest.approx(0.1, rel=1e-14)


@pytest.mark.parametrize("t", [-1e-9, 1.0 + 1e-9, np.nan])
def test_sigma_rejects_t_outside_unit_interval(t):
    with pytest.raises(DomainError):
        sigma_of_t(SCHED, t)


@pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0), (0.0, 1.0), (-1.0, 1.0)])
def test_degenerate_schedule_rejected(lo, hi):
    with pytest.raises(DomainError):
        NoiseSchedule(lo, hi)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1e-6, 1.0),
    st.floats(1.01, 1e3),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_schedule_is_monotone_and_log_linear(smin, factor, t1, t2):
    sched = NoiseSchedule(smin, smin * factor)
    s1, s2 = sigma_of_t(sched, t1), sigma_of_t(sched, t2)
    if t2 - t1 > 1e-12:
        assert s1 < s2
    elif t1 <= t2:
        assert s1 <= s2
    # log sigma is affine in t
    expected = np.log(smin) + (t1 - t2) * np.log(factor) + (np.log(s2) - np.log(smin))
    assert np.log(s1) == pytest.approx(expected, abs=1e-9)


def test_vector_t_and_derivative():
    t = np.linspace(0, 1, 7)
    s = SCHED.sigma(t)
    assert s.shape == (7,)
    h = 1e-6
    tm = np.clip(t - h, 0, 1)
    tp = np.clip(t + h, 0, 1)
    fd = (SCHED.sigma(tp) ** 2 - SCHED.sigma(tm) ** 2) / (tp - tm)
    np.testing.assert_allclose(SCHED.dsigma2_dt(t), fd, rtol=1e-5)


def test_time_grid():
    g = SCHED.time_grid(4)
    np.testing.assert_allclose(g, [1.0, 0.75, 0.5, 0.25, 0.0])
    with pytest.raises(DomainError):
        SCHED.time_grid(0)


def test_diffuse_zero_noise_limit_and_linearity():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    tiny = NoiseSchedule(1e-300, 1.0)
    np.testing.assert_allclose(diffuse(x0, 0.0, tiny, rng, noise=eps), x0, rtol=0, atol=1e-290)
    e1 = np.eye(5)[0]
    np.testing.assert_allclose(diffuse(np.zeros(5), 1.0, SCHED, rng, noise=e1), 10.0 * e1, rtol=1e-14)


def test_diffuse_variance_monte_carlo():
    rng = np.random.default_rng(1)
    n, t = 100_000, 0.7
    x0 = np.full((n, 1), 3.0)
    d = diffuse(x0, t, SCHED, rng)[:, 0] - 3.0
    s2 = sigma_of_t(SCHED, t) ** 2
    # Var of the sample variance of a Gaussian is 2 s^4 / (n - 1).
    se = np.sqrt(2.0 / (n - 1)) * s2
    assert abs(d.var(ddof=1) - s2) < 3 * se


def test_diffuse_per_row_times():
    rng = np.random.default_rng(2)
    x0 = np.zeros((3, 2))
    noise = np.ones((3, 2))
    t = np.array([0.0, 0.5, 1.0])
    out = diffuse(x0, t, SCHED, rng, noise=noise)
    np.testing.assert_allclose(out[:, 0], [1e-3, 0.1, 10.0], rtol=1e-12)


def test_time_sampler_interior_and_ks():
    rng = np.random.default_rng(3)
    t = TimeSampler().sample(rng, size=1_000_000)
    assert t.min() > 0.0 and t.max() < 1.0
    ks = stats.kstest(t, stats.beta(3, 3).cdf).statistic
    assert ks < 0.005


def test_score_from_denoiser_examples():
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(score_from_denoiser(x, x, 0.5), np.zeros(2))
    sigma = 0.7
    xt = np.array([1.3])
    score = score_from_denoiser(xt / (1 + sigma**2), xt, sigma)
    np.testing.assert_allclose(score, -xt / (1 + sigma**2), rtol=1e-14)
    for bad in (0.0, -1.0):
        with pytest.raises(DomainError):
            score_from_denoiser(x, x, bad)


def _mixture_logpdf(x, w, mu, var):
    comps = [np.log(wk) + stats.norm.logpdf(x, mk, np.sqrt(vk)) for wk, mk, vk in zip(w, mu, var)]
    return np.logaddexp.reduce(comps, axis=0)


def test_tweedie_score_matches_mixture_density():
    # Two-component mixture prior; its convolution with N(0, sigma^2) is a
    # mixture with inflated variances, and E[x0 | xt] is the responsibility
    # weighted component posterior mean.
    w = np.array([0.3, 0.7])
    mu = np.array([-1.5, 2.0])
    var = np.array([0.4, 0.9])
    sigma = 0.8
    xt = np.linspace(-4, 5, 41)
    vt = var + sigma**2
    logr = np.log(w)[:, None] + stats.norm.logpdf(xt[None, :], mu[:, None], np.sqrt(vt)[:, None])
    r = np.exp(logr - np.logaddexp.reduce(logr, axis=0))
    post_mean = mu[:, None] + (var / vt)[:, None] * (xt[None, :] - mu[:, None])
    x0hat = np.sum(r * post_mean, axis=0)
    score = score_from_denoiser(x0hat, xt, sigma)
    h = 1e-5
    fd = (_mixture_logpdf(xt + h, w, mu, vt) - _mixture_logpdf(xt - h, w, mu, vt)) / (2 * h)
    np.testing.assert_allclose(score, fd, rtol=1e-4, atol=1e-8)


def test_tweedie_consistency_gaussian():
    from ddprism.denoiser import GaussianDenoiser

    rng = np.random.default_rng(4)
    d = 4
    L = rng.standard_normal((d, d))
    S = L @ L.T + 0.1 * np.eye(d)
    mu = rng.standard_normal(d)
    sigma = 0.6
    xt = rng.standard_normal((10, d))
    model = GaussianDenoiser(mu, S)
    score = score_from_denoiser(model.denoise(xt, sigma), xt, sigma)
    expected = -np.linalg.solve(S + sigma**2 * np.eye(d), (xt - mu).T).T
    np.testing.assert_allclose(score, expected, rtol=1e-10, atol=1e-12)
