"""Denoising score-matching training for :class:`~ddprism.denoiser.MLPDenoiser`.

Adam with a linear learning-rate schedule and global gradient-norm clipping.
The optimizer is meant to be re-created for every EM lap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .denoiser import ContractError, MLPDenoiser
from .sde import NoiseSchedule, TimeSampler, sigma_of_t

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a training lap produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 65_536
    batch_size: int = 1024
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float | None = None
    update_sigma_data: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ContractError("steps and batch_size must be positive")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ContractError("ema_decay must lie in (0, 1)")

    def learning_rate(self, step: int) -> float:
        """Linear interpolation from ``lr_init`` (step 0) to ``lr_final`` (last step)."""
        if self.steps == 1:
            return self.lr_init
        frac = min(max(step, 0), self.steps - 1) / (self.steps - 1)
        return self.lr_init + (self.lr_final - self.lr_init) * frac


@dataclass
class TrainState:
    """Adam moments and step counter for one lap."""

    m: dict
    v: dict
    step: int = 0
    ema: dict | None = None
    losses: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: MLPDenoiser, config: TrainConfig | None = None) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in model.params.items()}
        ema = None
        if config is not None and config.ema_decay is not None:
            ema = {k: p.copy() for k, p in model.params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, ema=ema)


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale ``grads`` so their joint Euclidean norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(np.sum(g**2) for g in grads.values())))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_update(params: dict, grads: dict, state: TrainState, lr: float, config: TrainConfig):
    """One in-place Adam step; increments ``state.step``."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def score_matching_loss(
    model: MLPDenoiser,
    batch,
    schedule: NoiseSchedule,
    time_sampler: TimeSampler,
    rng: np.random.Generator,
):
    """Monte-Carlo denoising score-matching loss on ``batch`` with its gradient.

    Draws one ``t ~ Beta`` and one Gaussian perturbation per element.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ContractError("batch must be a non-empty (n, d) array")
    t = time_sampler.sample(rng, size=batch.shape[0])
    noise = rng.standard_normal(batch.shape)
    return model.denoising_loss(batch, sigma_of_t(schedule, t), noise)


def sample_rms(samples) -> float:
    samples = np.asarray(samples, dtype=float)
    return float(np.sqrt(np.mean(samples**2)))


def train_lap(
    state: TrainState,
    model: MLPDenoiser,
    samples,
    config: TrainConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    time_sampler: TimeSampler = TimeSampler(),
) -> TrainState:
    """Run ``config.steps`` Adam steps on minibatches drawn from ``samples``.

    ``model.params`` is updated in place. When ``config.update_sigma_data`` is
    set, the preconditioning scale is first reset to the RMS of ``samples``.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != model.dim or samples.shape[0] == 0:
        raise ContractError(f"samples must be (n, {model.dim}) with n > 0")
    if config.update_sigma_data:
        rms = sample_rms(samples)
        if rms > 0.0:
            model.sigma_data = rms
    n = samples.shape[0]
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        lr = config.learning_rate(state.step)
        loss, grads = score_matching_loss(model, samples[idx], schedule, time_sampler, rng)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {state.step}")
        grads, _ = clip_by_global_norm(grads, config.clip_norm)
        adam_update(model.params, grads, state, lr, config)
        if state.ema is not None:
            d = config.ema_decay
            for k, p in model.params.items():
                state.ema[k] *= d
                state.ema[k] += (1.0 - d) * p
        state.losses.append(loss)
    if state.ema is not None:
        for k in model.params:
            model.params[k] = state.ema[k].copy()
    log.debug("lap done: %d steps, final loss %.4g", config.steps, state.losses[-1])
    return state
