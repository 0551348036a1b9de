"""Variance-exploding diffusion: noise schedule, training-time sampling and
Tweedie conversions.

The forward process is ``x_t = x_0 + sigma(t) * eps`` with a log-linear
``sigma(t)`` between ``sigma_min`` and ``sigma_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-linear variance-exploding noise schedule.

    ``sigma(t) = exp(log(sigma_min) + (log(sigma_max) - log(sigma_min)) * t)``
    for ``t`` in ``[0, 1]``.
    """

    sigma_min: float = 1e-3
    sigma_max: float = 10.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma_min) and np.isfinite(self.sigma_max)):
            raise DomainError("noise levels must be finite")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise DomainError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max) - np.log(self.sigma_min))

    def sigma(self, t):
        return sigma_of_t(self, t)

    def dsigma2_dt(self, t):
        """Derivative of ``sigma(t)**2``, i.e. ``g(t)**2`` for the VE SDE."""
        s = sigma_of_t(self, t)
        return 2.0 * self.log_ratio * s**2

    def time_grid(self, steps: int) -> np.ndarray:
        """Uniform grid ``1 = t_0 > t_1 > ... > t_steps = 0``."""
        if steps < 1:
            raise DomainError("steps must be >= 1")
        return np.linspace(1.0, 0.0, steps + 1)


@dataclass(frozen=True)
class TimeSampler:
    """Beta law for the diffusion time used during training."""

    alpha: float = 3.0
    beta: float = 3.0

    def sample(self, rng: np.random.Generator, size=None):
        t = rng.beta(self.alpha, self.beta, size=size)
        # Beta draws can round to the closed endpoints in float64.
        return np.clip(t, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t


def sigma_of_t(schedule: NoiseSchedule, t):
    """Noise level at time ``t`` (scalar or array)."""
    t = _check_t(t)
    out = np.exp(np.log(schedule.sigma_min) + schedule.log_ratio * t)
    return float(out) if out.ndim == 0 else out


def diffuse(x0, t, schedule: NoiseSchedule, rng: np.random.Generator, noise=None):
    """Draw ``x_t ~ N(x_0, sigma(t)^2 I)``.

    ``t`` may be a scalar or hold one time per leading row of ``x0``. Passing
    ``noise`` fixes the standard-normal draw.
    """
    x0 = np.asarray(x0, dtype=float)
    sigma = np.asarray(sigma_of_t(schedule, t), dtype=float)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    if sigma.ndim:
        sigma = sigma.reshape(sigma.shape + (1,) * (x0.ndim - sigma.ndim))
    return x0 + sigma * noise


def score_from_denoiser(x0hat, xt, sigma_t):
    """Tweedie's formula: ``(E[x_0 | x_t] - x_t) / sigma_t^2``."""
    sigma_t = np.asarray(sigma_t, dtype=float)
    if np.any(~(sigma_t > 0.0)):
        raise DomainError("sigma_t must be positive")
    xt = np.asarray(xt, dtype=float)
    if sigma_t.ndim:
        sigma_t = sigma_t.reshape(sigma_t.shape + (1,) * (xt.ndim - sigma_t.ndim))
    return (np.asarray(x0hat, dtype=float) - xt) / sigma_t**2
