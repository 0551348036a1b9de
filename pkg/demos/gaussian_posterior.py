"""Joint posterior sampling against the closed-form Gaussian posterior.

Two Gaussian sources in R^5 are observed through one noisy 3x5 projection.
The script draws posterior samples with the predictor-corrector sampler and
with Gibbs sweeps, then compares their moments with the exact answer.

    python3 demos/gaussian_posterior.py --draws 4000 --steps 256
"""

import argparse
import time

import numpy as np

from ddprism.denoiser import GaussianDenoiser
from ddprism.gibbs import GibbsConfig, gibbs_sample
from ddprism.posterior import Observation, SamplerConfig, gaussian_joint_posterior, pc_sample_posterior


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--draws", type=int, default=4000)
    parser.add_argument("--steps", type=int, default=256)
    parser.add_argument("--noise-var", type=float, default=0.25)
    parser.add_argument("--gibbs-rounds", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    priors = []
    for _ in range(2):
        L = rng.standard_normal((5, 5))
        priors.append(GaussianDenoiser(2.0 * rng.standard_normal(5), L @ L.T / 5 + 0.3 * np.eye(5)))
    mixing = [rng.standard_normal((3, 5)) / np.sqrt(5) for _ in range(2)]
    truth = [p.sample(rng, 1)[0] for p in priors]
    y = sum(A @ x for A, x in zip(mixing, truth)) + np.sqrt(args.noise_var) * rng.standard_normal(3)
    obs = Observation(y=y, mixing=mixing, noise_cov=args.noise_var)
    mean, cov = gaussian_joint_posterior(obs, priors)

    def summary(name, draws, seconds):
        x = np.concatenate(draws, axis=-1)
        m_err = np.linalg.norm(x.mean(0) - mean) / np.linalg.norm(mean)
        c_err = np.linalg.norm(np.cov(x.T) - cov) / np.linalg.norm(cov)
        print(f"{name:6s} mean rel err {m_err:.4f}  cov rel err {c_err:.4f}  ({seconds:.1f} s)")

    batch = obs.repeat(args.draws)
    t0 = time.perf_counter()
    joint = pc_sample_posterior(batch, priors, SamplerConfig(pc_steps=args.steps), np.random.default_rng(1))
    summary("joint", joint, time.perf_counter() - t0)

    init = [p.sample(np.random.default_rng(2 + b), args.draws) for b, p in enumerate(priors)]
    cfg = GibbsConfig(gibbs_rounds=args.gibbs_rounds, sampler=SamplerConfig(pc_steps=max(1, args.steps // 2)))
    t0 = time.perf_counter()
    gibbs = gibbs_sample(batch, priors, init, cfg, np.random.default_rng(3))
    summary("gibbs", gibbs, time.perf_counter() - t0)


if __name__ == "__main__":
    main()
