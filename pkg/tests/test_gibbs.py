import numpy as np
import pytest
from scipy import stats

from ddprism.denoiser import ContractError, GaussianDenoiser
from ddprism.gibbs import GibbsConfig, gibbs_sample, residual
from ddprism.posterior import Observation, SamplerConfig, gaussian_joint_posterior, pc_sample_posterior


def test_residual_examples():
    y = np.array([1.0, 2.0, 3.0])
    eye = np.eye(3)
    obs = Observation(y=y, mixing=[eye, eye], noise_cov=0.1)
    np.testing.assert_allclose(residual(obs, [None, np.array([1.0, 1.0, 1.0])], 0), [0.0, 1.0, 2.0])
    np.testing.assert_allclose(residual(obs, [np.zeros(3), np.zeros(3)], 1), y)
    single = Observation(y=y, mixing=[eye], noise_cov=0.1)
    np.testing.assert_allclose(residual(single, [None], 0), y)
    with pytest.raises(ContractError):
        residual(obs, [None], 0)
    with pytest.raises(ContractError):
        residual(obs, [None, np.zeros(2)], 0)
    with pytest.raises(ContractError):
        residual(obs, [None, np.zeros(3)], 2)


def test_single_source_gibbs_is_one_posterior_draw():
    rng = np.random.default_rng(0)
    prior = GaussianDenoiser(rng.standard_normal(4), np.eye(4))
    obs = Observation(y=rng.standard_normal((8, 2)), mixing=[rng.standard_normal((2, 4))], noise_cov=0.05)
    inner = SamplerConfig(pc_steps=16)
    (a,) = gibbs_sample(obs, [prior], [np.zeros((8, 4))], GibbsConfig(gibbs_rounds=1, sampler=inner), np.random.default_rng(1))
    (b,) = pc_sample_posterior(obs, [prior], inner, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def _toy(seed=1):
    rng = np.random.default_rng(seed)
    priors = [GaussianDenoiser(3.0 * rng.standard_normal(2), np.diag([1.0, 0.5])) for _ in range(2)]
    mixing = [rng.standard_normal((2, 2)), rng.standard_normal((2, 2))]
    # Moderate noise keeps the conditional chains mixing within a few sweeps.
    obs = Observation(y=3.0 * rng.standard_normal(2), mixing=mixing, noise_cov=0.25)
    return priors, obs


def _run(priors, obs, order, seed, n=1000, rounds=64, steps=48):
    cfg = GibbsConfig(gibbs_rounds=rounds, sampler=SamplerConfig(pc_steps=steps), order=order)
    init = [np.zeros((n, 2)), np.zeros((n, 2))]
    return np.concatenate(gibbs_sample(obs.repeat(n), priors, init, cfg, np.random.default_rng(seed)), axis=-1)


def test_gaussian_gibbs_recovers_joint_posterior_mean():
    priors, obs = _toy()
    mean, cov = gaussian_joint_posterior(obs, priors)
    x = _run(priors, obs, None, 2)
    for b in range(2):
        got, ref = x.mean(0)[2 * b : 2 * b + 2], mean[2 * b : 2 * b + 2]
        assert np.linalg.norm(got - ref) < 0.03 * np.linalg.norm(ref)
    np.testing.assert_allclose(np.cov(x.T), cov, atol=0.15 * np.max(np.diag(cov)))


def test_visiting_order_does_not_change_the_target():
    priors, obs = _toy(3)
    a = _run(priors, obs, (0, 1), 4, n=1500, rounds=16, steps=24)
    b = _run(priors, obs, (1, 0), 5, n=1500, rounds=16, steps=24)
    # Two-sample KS per coordinate at alpha = 0.01, Bonferroni corrected.
    pvalues = [stats.ks_2samp(a[:, i], b[:, i]).pvalue for i in range(a.shape[1])]
    assert min(pvalues) > 0.01 / a.shape[1]


def test_compute_accounting_and_diagnostics():
    priors, obs = _toy()
    cfg = GibbsConfig(gibbs_rounds=3, sampler=SamplerConfig(pc_steps=5, corrections_per_step=1))
    seen = []
    gibbs_sample(obs, priors, [np.zeros(2), np.zeros(2)], cfg, np.random.default_rng(0), diagnostics=lambda s, i: seen.append(i))
    assert cfg.evaluations_per_sample(2) == 3 * 2 * 10
    assert len(seen) == cfg.evaluations_per_sample(2)
    assert {(i["round"], i["source"]) for i in seen} == {(r, b) for r in range(3) for b in range(2)}


def test_gibbs_contracts():
    priors, obs = _toy()
    with pytest.raises(ContractError):
        GibbsConfig(gibbs_rounds=0)
    with pytest.raises(ContractError):
        GibbsConfig(order=(0, 0)).visit_order(2)
    with pytest.raises(ContractError):
        gibbs_sample(obs, priors, [np.zeros(2)], GibbsConfig(), np.random.default_rng(0))
    with pytest.raises(ContractError):
        gibbs_sample(obs, priors, [np.zeros(2), np.zeros(3)], GibbsConfig(), np.random.default_rng(0))


def test_residual_conservation():
    rng = np.random.default_rng(7)
    mixing = [rng.standard_normal((3, 5)) for _ in range(3)]
    xs = [rng.standard_normal((4, 5)) for _ in range(3)]
    obs = Observation(y=rng.standard_normal((4, 3)), mixing=mixing, noise_cov=0.1)
    for b in range(3):
        r = residual(obs, xs, b)
        others = sum(xs[k] @ mixing[k].T for k in range(3) if k != b)
        np.testing.assert_allclose(r + others, obs.y, rtol=0, atol=1e-13)
    exact = Observation(y=sum(x @ A.T for A, x in zip(mixing, xs)), mixing=mixing, noise_cov=0.1)
    np.testing.assert_allclose(residual(exact, [None] + xs[1:], 0), xs[0] @ mixing[0].T, atol=1e-13)
