"""Presets and truth-aware evaluation for the 1D-manifold experiments.

The presets carry the reference hyperparameters. :func:`scaled` keeps the
method and shrinks the lap, sampler and training budgets.

Nothing here feeds true sources back into training: :class:`TruthEvaluator`
is only ever called after a lap's checkpoints are written.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, generate_manifold_sampler
from .em import EMConfig, RunRecorder, run_em_contrastive, run_em_joint, stream
from .gibbs import GibbsConfig
from .metrics import SinkhornConfig, psnr, report_psnr, sinkhorn_divergence
from .posterior import SamplerConfig, pc_sample_prior
from .sde import NoiseSchedule
from .training import TrainConfig

_EVAL = 7

CONTRASTIVE_MLP = {"hidden": (256, 256, 256), "embedding_features": 64, "conditioning": "concat"}
MIXED_MLP = {"hidden": (256, 256, 256), "embedding_features": 128, "conditioning": "film"}


def contrastive_1d(n_sources: int = 3, seed: int = 0) -> EMConfig:
    """Reference contrastive settings: 16/32/64 laps, 16,384 PC steps."""
    schedule = NoiseSchedule(1e-3, 10.0)
    return EMConfig(
        laps=(16, 32, 64)[:n_sources],
        train=TrainConfig(steps=65_536, batch_size=1024, lr_init=1e-3, lr_final=1e-6, clip_norm=1.0),
        sampler=SamplerConfig(pc_steps=16_384, corrections_per_step=1, tau=0.1, schedule=schedule),
        init_gaussian_laps=16,
        mlp=dict(CONTRASTIVE_MLP),
        seed=seed,
    )


def contrastive_1d_gibbs(n_sources: int = 2, seed: int = 0) -> EMConfig:
    """Gibbs counterpart: 64 sweeps of 256-step inner chains."""
    base = contrastive_1d(n_sources, seed)
    inner = replace(base.sampler, pc_steps=256)
    return replace(base, strategy="gibbs", gibbs=GibbsConfig(gibbs_rounds=64, sampler=inner))


def mixed_1d(f_mix: float = 0.1, seed: int = 0) -> EMConfig:
    """Reference mixed settings: 70 laps, FiLM conditioning, 8192 Gaussian laps."""
    schedule = NoiseSchedule(5e-3, 15.0)
    return EMConfig(
        laps=(70,),
        train=TrainConfig(steps=65_536, batch_size=1024, lr_init=1e-4, lr_final=1e-5, clip_norm=1.0),
        sampler=SamplerConfig(
            pc_steps=16_384,
            corrections_per_step=1,
            tau=0.08,
            cg_regularization=1e-3,
            cg_denominator_min=1e-3,
            schedule=schedule,
        ),
        init_gaussian_laps=8192,
        mlp=dict(MIXED_MLP),
        seed=seed,
    )


def scaled(config: EMConfig, laps, pc_steps: int, train_steps: int | None = None, **kw) -> EMConfig:
    """Same method with smaller budgets; Gibbs inner chains keep their share."""
    sampler = replace(config.sampler, pc_steps=pc_steps)
    gibbs = config.gibbs
    if gibbs is not None:
        ratio = config.sampler.pc_steps // gibbs.sampler.pc_steps
        gibbs = replace(gibbs, sampler=replace(gibbs.sampler, pc_steps=max(1, pc_steps // ratio)))
    train = config.train if train_steps is None else replace(config.train, steps=train_steps)
    return replace(config, laps=tuple(laps), sampler=sampler, gibbs=gibbs, train=train, **kw)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class TruthEvaluator:
    """Per-lap prior and posterior metrics against the true sources.

    Prior quality: Sinkhorn divergence between ``n_prior`` unconditional draws
    and fresh draws from the true manifold. Posterior quality: PSNR and
    Sinkhorn divergence between E-step samples and the matching true sources.
    ``sources`` restricts which sources are scored; ``None`` scores all.
    """

    dataset: Dataset
    n_prior: int = 1024
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(pc_steps=256))
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    n_posterior: int = 2048
    seed: int = 0
    sources: tuple | None = None
    posterior: bool = True

    def prior_reference(self, source: int, lap: int) -> np.ndarray:
        rng = stream(self.seed, _EVAL, lap, 1, source)
        curve = generate_manifold_sampler(self.dataset.manifolds[source])
        return curve(rng.random(self.n_prior))

    def __call__(self, stage, lap, models, estep=None):
        rows = []
        for b in sorted(models):
            if self.sources is not None and b not in self.sources:
                continue
            draw = pc_sample_prior(models[b], self.sampler, stream(self.seed, _EVAL, lap, 2, b), n=self.n_prior)
            sd = sinkhorn_divergence(draw, self.prior_reference(b, lap), self.sinkhorn)
            rows.append({"source": b, "kind": "prior", "sinkhorn": sd, "psnr": ""})
        if estep is None or not self.posterior:
            return rows
        for (v, b), x in sorted(estep.samples.items()):
            if self.sources is not None and b not in self.sources:
                continue
            truth = self.dataset.truth(v, allow_truth=True)[:, b]
            m = x.shape[0] // truth.shape[0]
            truth = np.tile(truth, (m, 1))
            ok = np.all(np.isfinite(x), axis=1)
            x, truth = x[ok], truth[ok]
            k = min(self.n_posterior, x.shape[0])
            sub = stream(self.seed, _EVAL, lap, 3, v * 1000 + b).choice(x.shape[0], k, replace=False)
            sd = sinkhorn_divergence(x[sub], truth[sub], self.sinkhorn)
            rows.append({"source": b, "kind": f"posterior_view{v}", "sinkhorn": sd, "psnr": report_psnr(psnr(truth, x))})
        return rows


def series(metrics: list[dict], source: int, kind: str = "prior", field_name: str = "sinkhorn") -> list[tuple[int, float]]:
    """``(lap, value)`` pairs for one source and metric kind, in lap order."""
    out = [(int(r["lap"]), float(r[field_name])) for r in metrics if int(r["source"]) == source and r["kind"] == kind]
    return sorted(out)


def moving_average(values, window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size < window:
        return values[:0]
    return np.convolve(values, np.ones(window) / window, mode="valid")


def run_experiment(dataset: Dataset, config: EMConfig, algorithm: str, evaluator=None, run_dir=None, n_stages=None):
    """Train with ``algorithm`` (``joint`` or ``contrastive``); returns models and the recorder."""
    recorder = RunRecorder(run_dir, config.snapshot(), evaluator=evaluator)
    if algorithm == "contrastive":
        models = run_em_contrastive(dataset, config, recorder=recorder, n_stages=n_stages)
    elif algorithm == "joint":
        models = run_em_joint(dataset, config, recorder=recorder)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return models, recorder
