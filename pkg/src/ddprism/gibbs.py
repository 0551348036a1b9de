"""Gibbs sampling of the joint source posterior.

Each source in turn is redrawn from its single-source posterior given the
current values of all others, using the observation residual in place of the
observation. Every inner chain restarts from fresh noise at ``t = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .denoiser import ContractError, Denoiser
from .posterior import CGError, Observation, SamplerConfig, SamplingError, _mv, pc_sample_posterior


@dataclass(frozen=True)
class GibbsConfig:
    """Number of sweeps and the inner single-source sampler.

    ``order`` fixes the source visiting order of every sweep; ``None`` means
    the cyclic order ``0 .. N_s - 1``.
    """

    gibbs_rounds: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    order: tuple | None = None

    def __post_init__(self):
        if self.gibbs_rounds < 1:
            raise ContractError("gibbs_rounds must be >= 1")

    def visit_order(self, n_sources: int) -> tuple:
        order = tuple(range(n_sources)) if self.order is None else tuple(self.order)
        if sorted(order) != list(range(n_sources)):
            raise ContractError(f"order {order} is not a permutation of {n_sources} sources")
        return order

    def evaluations_per_sample(self, n_sources: int) -> int:
        """Single-source score evaluations spent on one observation."""
        return self.gibbs_rounds * n_sources * self.sampler.evaluations_per_trajectory()


def residual(obs: Observation, fixed_sources: Sequence, hold_out: int) -> np.ndarray:
    """``y - sum_{b != hold_out} A_b x_b``.

    ``fixed_sources`` has one entry per source; the entry at ``hold_out`` is
    ignored and may be ``None``.
    """
    if len(fixed_sources) != obs.n_sources:
        raise ContractError(f"expected {obs.n_sources} source entries, got {len(fixed_sources)}")
    if not 0 <= hold_out < obs.n_sources:
        raise ContractError(f"hold_out {hold_out} out of range")
    r = obs.y.copy()
    for b, (A, x) in enumerate(zip(obs.mixing, fixed_sources)):
        if b == hold_out:
            continue
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != A.shape[-1]:
            raise ContractError(f"source {b} has length {x.shape[-1]}, mixing expects {A.shape[-1]}")
        r = r - _mv(A, x)
    return r


def gibbs_sample(
    obs: Observation,
    models: Sequence[Denoiser],
    init_sources: Sequence,
    config: GibbsConfig,
    rng: np.random.Generator,
    diagnostics: Callable | None = None,
) -> list:
    """Run ``gibbs_rounds`` sweeps and return the final source values.

    ``diagnostics(step, info)`` receives the inner CG statistics with the
    sweep index and source added under ``"round"`` and ``"source"``.
    """
    if len(models) != obs.n_sources or len(init_sources) != obs.n_sources:
        raise ContractError("need one model and one initial value per source")
    shapes = [obs.batch_shape + (d,) for d in obs.source_dims()]
    sources = []
    for b, (x, shape) in enumerate(zip(init_sources, shapes)):
        x = np.array(x, dtype=float)
        if x.shape != shape:
            raise ContractError(f"initial source {b} has shape {x.shape}, expected {shape}")
        sources.append(x)

    order = config.visit_order(obs.n_sources)
    for rnd in range(config.gibbs_rounds):
        for b in order:
            sub = replace(obs, y=residual(obs, sources, b), mixing=[obs.mixing[b]])
            hook = None
            if diagnostics is not None:
                hook = lambda step, info, rnd=rnd, b=b: diagnostics(step, dict(info, round=rnd, source=b))
            try:
                sources[b] = pc_sample_posterior(sub, [models[b]], config.sampler, rng, diagnostics=hook)[0]
            except (CGError, SamplingError) as err:
                raise type(err)(f"{err} (gibbs round {rnd}, source {b})") from err
    return sources
