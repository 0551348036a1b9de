"""Joint posterior sampling over independent sources with moment matching.

For an observation ``y = sum_b A_b x_b + eta`` with ``eta ~ N(0, Sigma_y)``, the
likelihood of the diffused sources is approximated by Gaussianizing each
``p(x_0^b | x_t^b)`` with its Tweedie mean and covariance
``sigma_t^2 * J_b`` (``J_b`` the denoiser Jacobian). The resulting score is

    J_b^T A_b^T (Sigma_y + sum_b sigma_t^2 A_b J_b A_b^T)^-1 (y - sum_b A_b E[x_0^b | x_t^b])

where the inverse is applied with conjugate gradient and every product with
``J_b`` is a vector-Jacobian product, so no Jacobian is ever formed.

All arrays carry an optional leading batch axis; one batch row is one
observation and all rows are processed together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .denoiser import ContractError, Denoiser
from .sde import NoiseSchedule

log = logging.getLogger(__name__)


class CGError(RuntimeError):
    """Raised when conjugate gradient produces non-finite values."""


class SamplingError(RuntimeError):
    """Raised when a sampling trajectory becomes non-finite."""


def _mv(A, x):
    return (A @ x[..., None])[..., 0]


def _mtv(A, x):
    return (np.swapaxes(A, -1, -2) @ x[..., None])[..., 0]


@dataclass
class Observation:
    """One view sample, or a batch of them along a leading axis.

    ``noise_cov`` is either an isotropic variance (scalar, or one per batch
    row) or a full covariance matrix (shared, or one per batch row).
    """

    y: np.ndarray
    mixing: list
    noise_cov: object
    view_id: int = 0
    sample_id: object = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.mixing = [np.asarray(A, dtype=float) for A in self.mixing]
        self.noise_cov = np.asarray(self.noise_cov, dtype=float)
        d_alpha = self.y.shape[-1]
        for b, A in enumerate(self.mixing):
            if A.ndim < 2 or A.shape[-2] != d_alpha:
                raise ContractError(f"mixing matrix {b} must have {d_alpha} rows, got {A.shape}")
        if self.isotropic:
            if np.any(~(self.noise_cov > 0.0)):
                raise ContractError("noise variance must be positive")
        else:
            cov = self.noise_cov
            if cov.shape[-2:] != (d_alpha, d_alpha):
                raise ContractError("noise covariance must be d_alpha x d_alpha")
            if not np.allclose(cov, np.swapaxes(cov, -1, -2)):
                raise ContractError("noise covariance must be symmetric")
            if np.any(np.diagonal(cov, axis1=-2, axis2=-1) <= 0.0):
                raise ContractError("noise covariance needs a positive diagonal")

    @property
    def isotropic(self) -> bool:
        return self.noise_cov.ndim <= max(self.y.ndim - 1, 0)

    @property
    def n_sources(self) -> int:
        return len(self.mixing)

    @property
    def batch_shape(self) -> tuple:
        return self.y.shape[:-1]

    def source_dims(self) -> list[int]:
        return [A.shape[-1] for A in self.mixing]

    def apply_noise_cov(self, v):
        if self.isotropic:
            var = self.noise_cov
            return var.reshape(var.shape + (1,) * (v.ndim - var.ndim)) * v
        return _mv(self.noise_cov, v)

    def forward(self, xs: Sequence[np.ndarray]) -> np.ndarray:
        """Noise-free observation ``sum_b A_b x_b``."""
        return sum(_mv(A, x) for A, x in zip(self.mixing, xs))

    def subset(self, sources: Sequence[int]) -> "Observation":
        return replace(self, mixing=[self.mixing[b] for b in sources])

    def repeat(self, n: int) -> "Observation":
        """Tile an unbatched observation into ``n`` identical rows."""
        if self.y.ndim != 1:
            raise ContractError("repeat expects an unbatched observation")
        tile = lambda a, k: np.broadcast_to(a, (n,) + a.shape[a.ndim - k :]).copy()
        cov = self.noise_cov if self.isotropic and self.noise_cov.ndim == 0 else tile(self.noise_cov, 2)
        return Observation(
            y=tile(self.y, 1),
            mixing=[tile(A, 2) for A in self.mixing],
            noise_cov=cov,
            view_id=self.view_id,
            sample_id=self.sample_id,
        )


@dataclass
class JointState:
    """Diffused source blocks ``x_t^b`` at a common noise level."""

    blocks: list
    t: float
    sigma: float

    def concat(self) -> np.ndarray:
        return np.concatenate(self.blocks, axis=-1)


@dataclass(frozen=True)
class SamplerConfig:
    """Predictor-corrector and conjugate-gradient settings.

    ``cg_error_threshold`` switches to retry semantics: CG first runs without
    regularization or denominator clamp, and rows whose final residual norm
    exceeds the threshold are solved again with both enabled. Without a
    threshold, regularization and clamp always apply.
    """

    pc_steps: int = 256
    corrections_per_step: int = 1
    tau: float = 0.1
    cg_max_iters: int = 3
    cg_tolerance: float = 1e-10
    cg_regularization: float = 0.0
    cg_denominator_min: float = 0.0
    cg_error_threshold: float | None = None
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.pc_steps < 1:
            raise ContractError("pc_steps must be >= 1")
        if self.corrections_per_step < 0:
            raise ContractError("corrections_per_step must be >= 0")
        if self.tau <= 0.0 or self.cg_max_iters < 1 or self.cg_tolerance <= 0.0:
            raise ContractError("tau, cg_max_iters and cg_tolerance must be positive")
        if self.cg_regularization < 0.0 or self.cg_denominator_min < 0.0:
            raise ContractError("CG regularization and clamp must be non-negative")

    def evaluations_per_trajectory(self) -> int:
        """Score evaluations made by one predictor-corrector run."""
        return self.pc_steps * (1 + self.corrections_per_step)


# ---------------------------------------------------------------------------
# Conjugate gradient


def _cg(operator, b, reg, dmin, max_iters, tol):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.sum(r * r, axis=-1)
    bnorm = np.sqrt(rs)
    active = np.sqrt(rs) > tol * bnorm
    iters = np.zeros(b.shape[:-1], dtype=int)
    min_denominator = np.inf
    for _ in range(max_iters):
        if not np.any(active):
            break
        Ap = operator(p)
        if reg:
            Ap = Ap + reg * p
        pAp = np.sum(p * Ap, axis=-1)
        denom = np.maximum(pAp, dmin) if dmin > 0.0 else pAp
        ok = active & (denom != 0.0)
        if np.any(ok):
            min_denominator = min(min_denominator, float(np.min(np.abs(denom[ok]))))
        alpha = np.divide(rs, denom, out=np.zeros_like(rs), where=ok)
        x = x + alpha[..., None] * p
        r = r - alpha[..., None] * Ap
        rs_new = np.sum(r * r, axis=-1)
        beta = np.divide(rs_new, rs, out=np.zeros_like(rs), where=ok & (rs > 0.0))
        p = r + beta[..., None] * p
        rs = np.where(ok, rs_new, rs)
        iters = iters + ok
        active = ok & (np.sqrt(rs) > tol * bnorm)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise CGError("conjugate gradient produced non-finite values")
    return x, {"iterations": iters, "residual": np.sqrt(rs), "min_denominator": min_denominator}


def conjugate_gradient(
    operator: Callable[[np.ndarray], np.ndarray],
    rhs,
    config: SamplerConfig,
    return_info: bool = False,
):
    """Solve ``(operator + reg I) x = rhs`` row-wise by conjugate gradient.

    Rows of ``rhs`` are independent systems sharing a batched ``operator``.
    Iteration stops per row once ``||r|| <= cg_tolerance * ||rhs||`` or after
    ``cg_max_iters``. The curvature ``p^T A p`` is clamped below by
    ``cg_denominator_min`` when that is positive.
    """
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise CGError("non-finite right-hand side")
    args = (config.cg_max_iters, config.cg_tolerance)
    reg, dmin = config.cg_regularization, config.cg_denominator_min
    if config.cg_error_threshold is None:
        x, info = _cg(operator, b, reg, dmin, *args)
        info["retried"] = np.zeros(b.shape[:-1], dtype=bool)
    else:
        x, info = _cg(operator, b, 0.0, 0.0, *args)
        bad = info["residual"] > config.cg_error_threshold
        if np.any(bad):
            x2, info2 = _cg(operator, b, reg, dmin, *args)
            x = np.where(bad[..., None], x2, x)
            for key in ("iterations", "residual"):
                info[key] = np.where(bad, info2[key], info[key])
            info["min_denominator"] = min(info["min_denominator"], info2["min_denominator"])
        info["retried"] = bad
    return (x, info) if return_info else x


# ---------------------------------------------------------------------------
# Scores


def _linearize_all(models, state: JointState):
    if len(models) != len(state.blocks):
        raise ContractError(f"{len(models)} models for {len(state.blocks)} source blocks")
    return [m.linearize(x, state.sigma) for m, x in zip(models, state.blocks)]


def joint_prior_score(models: Sequence[Denoiser], state: JointState, linearized=None) -> list:
    """Per-block Tweedie scores; the joint prior score is their concatenation."""
    lin = linearized if linearized is not None else _linearize_all(models, state)
    s2 = state.sigma**2
    return [(x0 - x) / s2 for (x0, _), x in zip(lin, state.blocks)]


def apply_likelihood_operator(obs: Observation, models, state: JointState, v, linearized=None):
    """``(Sigma_y + sum_b sigma^2 A_b J_b A_b^T) v`` via vector-Jacobian products."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != obs.y.shape[-1]:
        raise ContractError("v must have length d_alpha")
    lin = linearized if linearized is not None else _linearize_all(models, state)
    out = obs.apply_noise_cov(v)
    s2 = state.sigma**2
    for A, (_, vjp_fn) in zip(obs.mixing, lin):
        out = out + s2 * _mv(A, vjp_fn(_mtv(A, v)))
    return out


def joint_likelihood_score(
    obs: Observation,
    models,
    state: JointState,
    config: SamplerConfig,
    linearized=None,
    return_info: bool = False,
):
    """Moment-matched likelihood score, one block per source.

    The gradient of the Tweedie covariance with respect to ``x_t`` is not
    included.
    """
    if obs.n_sources != len(state.blocks):
        raise ContractError("observation and state disagree on the number of sources")
    lin = linearized if linearized is not None else _linearize_all(models, state)
    resid = obs.y - obs.forward([x0 for x0, _ in lin])
    op = lambda v: apply_likelihood_operator(obs, models, state, v, linearized=lin)
    try:
        w, info = conjugate_gradient(op, resid, config, return_info=True)
    except CGError as err:
        raise CGError(f"{err} (view {obs.view_id}, sample {obs.sample_id})") from err
    score = [vjp_fn(_mtv(A, w)) for A, (_, vjp_fn) in zip(obs.mixing, lin)]
    return (score, info) if return_info else score


def joint_posterior_score(obs, models, state, config, likelihood: bool = True):
    lin = _linearize_all(models, state)
    prior = joint_prior_score(models, state, linearized=lin)
    if not likelihood:
        return prior, None
    like, info = joint_likelihood_score(obs, models, state, config, linearized=lin, return_info=True)
    return [p + q for p, q in zip(prior, like)], info


# ---------------------------------------------------------------------------
# Predictor-corrector sampling


def _row_norm(blocks):
    return np.sqrt(sum(np.sum(b * b, axis=-1) for b in blocks))


def _pc_loop(score_fn, shapes, config: SamplerConfig, rng: np.random.Generator):
    """Reverse VE SDE: Euler-Maruyama predictor plus Langevin corrector.

    ``score_fn(blocks, sigma, step)`` returns per-block scores.
    """
    sched = config.schedule
    ts = sched.time_grid(config.pc_steps)
    sigmas = sched.sigma(ts)
    blocks = [sigmas[0] * rng.standard_normal(s) for s in shapes]
    for i in range(config.pc_steps):
        s_hi, s_lo = sigmas[i], sigmas[i + 1]
        dvar = s_hi**2 - s_lo**2
        score = score_fn(blocks, s_hi, ts[i], i)
        blocks = [x + dvar * g + np.sqrt(dvar) * rng.standard_normal(x.shape) for x, g in zip(blocks, score)]
        for _ in range(config.corrections_per_step):
            score = score_fn(blocks, s_lo, ts[i + 1], i)
            z = [rng.standard_normal(x.shape) for x in blocks]
            # Norms are averaged over the batch; per-row ratios are heavy
            # tailed and inflate the variance along stiff directions.
            gnorm = float(np.mean(_row_norm(score)))
            znorm = float(np.mean(_row_norm(z)))
            eps = 2.0 * (config.tau * znorm / gnorm) ** 2 if gnorm > 0.0 else 0.0
            blocks = [x + eps * g + np.sqrt(2.0 * eps) * n for x, g, n in zip(blocks, score, z)]
        if not all(np.all(np.isfinite(x)) for x in blocks):
            raise SamplingError(f"non-finite state at predictor step {i}")
    return blocks


def pc_sample_posterior(
    obs: Observation,
    models: Sequence[Denoiser],
    config: SamplerConfig,
    rng: np.random.Generator,
    likelihood: bool = True,
    diagnostics: Callable | None = None,
) -> list:
    """Draw one joint posterior sample of all sources per observation row.

    Returns one ``(*batch, d_b)`` array per source. With ``likelihood=False``
    the observation only fixes shapes and the draw comes from the joint prior.
    ``diagnostics(step, info)`` receives CG statistics after every score
    evaluation.
    """
    if len(models) != obs.n_sources:
        raise ContractError("need one model per source")
    for b, (m, d) in enumerate(zip(models, obs.source_dims())):
        if m.dim != d:
            raise ContractError(f"model {b} has dim {m.dim}, mixing expects {d}")
    shapes = [obs.batch_shape + (d,) for d in obs.source_dims()]

    def score_fn(blocks, sigma, t, step):
        state = JointState(blocks=blocks, t=t, sigma=sigma)
        score, info = joint_posterior_score(obs, models, state, config, likelihood=likelihood)
        if diagnostics is not None and info is not None:
            diagnostics(step, info)
        return score

    return _pc_loop(score_fn, shapes, config, rng)


def pc_sample_prior(
    model: Denoiser, config: SamplerConfig, rng: np.random.Generator, n: int | None = None
) -> np.ndarray:
    """Unconditional draw(s) from the prior encoded by ``model``."""
    shape = (model.dim,) if n is None else (n, model.dim)

    def score_fn(blocks, sigma, t, step):
        return [model.score(blocks[0], sigma)]

    return _pc_loop(score_fn, [shape], config, rng)[0]


# ---------------------------------------------------------------------------
# Closed-form Gaussian references


def gaussian_joint_posterior(obs: Observation, priors) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior of the stacked sources for Gaussian priors.

    ``priors`` are :class:`~ddprism.denoiser.GaussianDenoiser` objects (or any
    objects with ``mean`` and ``covariance``). Returns the stacked mean
    ``(*batch, D)`` and covariance ``(*batch, D, D)``.
    """
    mu = np.concatenate([p.mean for p in priors])
    S = _block_diag([p.covariance for p in priors])
    A = np.concatenate([np.broadcast_to(M, obs.batch_shape + M.shape[-2:]) for M in obs.mixing], axis=-1)
    if obs.isotropic:
        var = np.asarray(obs.noise_cov)
        Sy = var.reshape(var.shape + (1, 1)) * np.eye(obs.y.shape[-1])
    else:
        Sy = obs.noise_cov
    SAt = S @ np.swapaxes(A, -1, -2)
    C = A @ SAt + Sy
    gain = np.swapaxes(np.linalg.solve(C, np.swapaxes(SAt, -1, -2)), -1, -2)
    resid = obs.y - _mv(A, np.broadcast_to(mu, obs.batch_shape + mu.shape))
    mean = mu + _mv(gain, resid)
    cov = S - gain @ np.swapaxes(SAt, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mean, cov


def _block_diag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i : i + k, i : i + k] = m
        i += k
    return out


def split_blocks(stacked, dims: Sequence[int]) -> list:
    return np.split(stacked, np.cumsum(dims)[:-1], axis=-1)
