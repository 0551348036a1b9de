"""Denoisers ``d(x_t, sigma) ~ E[x_0 | x_t]`` with vector-Jacobian products.

Two backends share one interface:

* :class:`GaussianDenoiser` is the exact posterior mean under a Gaussian prior.
* :class:`MLPDenoiser` is an EDM-preconditioned multi-layer perceptron with
  hand-written reverse-mode gradients, both for its weights (training) and
  for its input (the VJP used by moment-matching posterior sampling).

Every method accepts a leading batch axis. ``sigma`` is a scalar or holds one
value per row.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit


class ContractError(ValueError):
    """Raised when inputs violate a shape or size contract."""


def _as_column(sigma, batch_ndim: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    return sigma.reshape(sigma.shape + (1,) * (batch_ndim + 1 - sigma.ndim))


class Denoiser:
    """Common surface of the denoiser backends.

    Subclasses implement :meth:`linearize`, which evaluates the denoiser and
    returns a closure computing row-vector Jacobian products at that point.
    ``counter`` tallies ``denoise`` and ``vjp`` evaluations (one per batched
    call) so samplers can be audited for compute.
    """

    dim: int

    def __init__(self):
        self.counter = Counter()

    def _check(self, xt) -> np.ndarray:
        xt = np.asarray(xt, dtype=float)
        if xt.ndim == 0 or xt.shape[-1] != self.dim:
            raise ContractError(
                f"expected trailing dimension {self.dim}, got shape {xt.shape}"
            )
        return xt

    def linearize(self, xt, sigma) -> tuple[np.ndarray, Callable]:
        raise NotImplementedError

    def denoise(self, xt, sigma) -> np.ndarray:
        return self.linearize(xt, sigma)[0]

    def vjp(self, xt, sigma, v) -> np.ndarray:
        return self.linearize(xt, sigma)[1](v)

    def score(self, xt, sigma) -> np.ndarray:
        from .sde import score_from_denoiser

        return score_from_denoiser(self.denoise(xt, sigma), xt, sigma)


class GaussianDenoiser(Denoiser):
    """Posterior mean ``mu + S (S + sigma^2 I)^-1 (x_t - mu)`` for a prior N(mu, S)."""

    def __init__(self, mean, covariance):
        super().__init__()
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        if covariance.shape != (mean.size, mean.size):
            raise ContractError("covariance must be d x d with d = len(mean)")
        if not np.allclose(covariance, covariance.T, rtol=1e-10, atol=1e-12):
            raise ContractError("covariance must be symmetric")
        covariance = 0.5 * (covariance + covariance.T)
        evals, evecs = np.linalg.eigh(covariance)
        if evals.min() < -1e-10 * max(1.0, evals.max()):
            raise ContractError("covariance must be positive semi-definite")
        self.mean = mean
        self.covariance = covariance
        self.dim = mean.size
        self._evals = np.clip(evals, 0.0, None)
        self._evecs = evecs

    def gain(self, sigma: float) -> np.ndarray:
        """Dense ``S (S + sigma^2 I)^-1``, the Jacobian of the denoiser."""
        f = self._evals / (self._evals + float(sigma) ** 2)
        return (self._evecs * f) @ self._evecs.T

    def _apply_gain(self, u, sigma):
        s2 = _as_column(sigma, u.ndim - 1) ** 2
        f = self._evals / (self._evals + s2)
        return ((u @ self._evecs) * f) @ self._evecs.T

    def linearize(self, xt, sigma):
        xt = self._check(xt)
        self.counter["denoise"] += 1
        out = self.mean + self._apply_gain(xt - self.mean, sigma)

        def vjp_fn(v):
            self.counter["vjp"] += 1
            return self._apply_gain(np.asarray(v, dtype=float), sigma)

        return out, vjp_fn

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + (z * np.sqrt(self._evals)) @ self._evecs.T


def fit_gaussian(samples) -> GaussianDenoiser:
    """Maximum-likelihood Gaussian fit with a small diagonal jitter.

    The jitter is ``1e-6 * trace(S) / d`` (``1e-12`` when the trace is zero),
    which keeps ``S + sigma^2 I`` well conditioned at tiny ``sigma``.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ContractError("samples must be an (n, d) array")
    n, d = samples.shape
    if n < d + 1:
        raise ContractError(f"need at least d + 1 = {d + 1} samples, got {n}")
    mean = samples.mean(axis=0)
    centred = samples - mean
    cov = centred.T @ centred / n
    cov = 0.5 * (cov + cov.T)
    jitter = 1e-6 * np.trace(cov) / d
    if jitter <= 0.0:
        jitter = 1e-12
    return GaussianDenoiser(mean, cov + jitter * np.eye(d))


# ---------------------------------------------------------------------------
# MLP backend


def _silu(z):
    s = expit(z)
    return z * s, s


def sinusoidal_embedding(c_noise, features: int) -> np.ndarray:
    """Transformer-style positional encoding of ``c_noise``.

    Returns ``(..., features)`` with sines in the first half and cosines in
    the second.
    """
    half = features // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    arg = np.asarray(c_noise, dtype=float)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass
class _Cache:
    sigma: np.ndarray
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    emb: np.ndarray
    layers: list = field(default_factory=list)
    output_input: np.ndarray | None = None
    net_out: np.ndarray | None = None


class MLPDenoiser(Denoiser):
    """EDM-preconditioned MLP denoiser.

    ``d(x, sigma) = c_skip x + c_out F(c_in x, emb(c_noise))`` with
    ``c_skip = sd^2 / (sigma^2 + sd^2)``, ``c_out = sigma sd / sqrt(sigma^2 + sd^2)``,
    ``c_in = 1 / sqrt(sigma^2 + sd^2)`` and ``c_noise = log(sigma) / 4``,
    ``sd`` being ``sigma_data``.

    Each hidden block is Dense -> [FiLM] -> activation -> LayerNorm. With
    ``conditioning="concat"`` the embedding is appended to the network input;
    with ``"film"`` it drives a feature-wise affine map after every hidden
    dense layer.

    Args:
        dim: Source dimensionality.
        hidden: Hidden layer widths.
        embedding_features: Width of the sinusoidal noise embedding.
        conditioning: ``"concat"`` or ``"film"``.
        activation: ``"silu"`` or ``"identity"`` (the latter for tests).
        layer_norm: Whether hidden blocks end with a layer normalization.
        sigma_data: Data scale used by the preconditioning.
        rng: Generator or seed for the weight initialisation.
    """

    LN_EPS = 1e-5

    def __init__(
        self,
        dim: int,
        hidden=(256, 256, 256),
        embedding_features: int = 64,
        conditioning: str = "concat",
        activation: str = "silu",
        layer_norm: bool = True,
        sigma_data: float = 1.0,
        rng=None,
    ):
        super().__init__()
        if conditioning not in ("concat", "film"):
            raise ContractError(f"unknown conditioning {conditioning!r}")
        if activation not in ("silu", "identity"):
            raise ContractError(f"unknown activation {activation!r}")
        if embedding_features % 2:
            raise ContractError("embedding_features must be even")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embedding_features = int(embedding_features)
        self.conditioning = conditioning
        self.activation = activation
        self.layer_norm = bool(layer_norm)
        self.sigma_data = float(sigma_data)
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(rng))

    # -- construction -------------------------------------------------------

    @property
    def widths(self) -> list[int]:
        first = self.dim + (self.embedding_features if self.conditioning == "concat" else 0)
        return [first, *self.hidden, self.dim]

    def _init_params(self, rng):
        widths = self.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"dense{i}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
            self.params[f"dense{i}.b"] = np.zeros(fan_out)
        for i, h in enumerate(self.hidden):
            if self.conditioning == "film":
                # Zero init makes every FiLM layer start as the identity.
                self.params[f"film{i}.w"] = np.zeros((self.embedding_features, 2 * h))
                self.params[f"film{i}.b"] = np.zeros(2 * h)
            if self.layer_norm:
                self.params[f"norm{i}.scale"] = np.ones(h)
                self.params[f"norm{i}.bias"] = np.zeros(h)

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "embedding_features": self.embedding_features,
            "conditioning": self.conditioning,
            "activation": self.activation,
            "layer_norm": self.layer_norm,
            "sigma_data": self.sigma_data,
        }

    def copy(self) -> "MLPDenoiser":
        new = MLPDenoiser.__new__(MLPDenoiser)
        Denoiser.__init__(new)
        for key, value in self.__dict__.items():
            if key not in ("params", "counter"):
                setattr(new, key, value)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key], dtype="<f8").tobytes())
        h.update(np.float64(self.sigma_data).astype("<f8").tobytes())
        return h.hexdigest()

    # -- preconditioning ----------------------------------------------------

    def preconditioning(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if np.any(~(sigma > 0.0)):
            raise ContractError("sigma must be positive")
        sd2 = self.sigma_data**2
        norm = np.sqrt(sigma**2 + sd2)
        c_skip = sd2 / (sigma**2 + sd2)
        c_out = sigma * self.sigma_data / norm
        c_in = 1.0 / norm
        c_noise = np.log(sigma) / 4.0
        return c_skip, c_out, c_in, c_noise

    # -- network ------------------------------------------------------------

    def _network_forward(self, u, emb, cache: _Cache | None):
        p = self.params
        if self.conditioning == "concat":
            h = np.concatenate([u, np.broadcast_to(emb, u.shape[:-1] + emb.shape[-1:])], axis=-1)
        else:
            h = u
        for i in range(len(self.hidden)):
            layer = {"h_in": h}
            z = h @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
            if self.conditioning == "film":
                gb = emb @ p[f"film{i}.w"] + p[f"film{i}.b"]
                gamma, beta = np.split(gb, 2, axis=-1)
                layer["z"] = z
                layer["gamma"] = gamma
                z = z * (1.0 + gamma) + beta
            if self.activation == "silu":
                a, s = _silu(z)
                layer["zf"] = z
                layer["sig"] = s
            else:
                a = z
            if self.layer_norm:
                mu = a.mean(axis=-1, keepdims=True)
                centred = a - mu
                inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + self.LN_EPS)
                xhat = centred * inv
                layer["xhat"] = xhat
                layer["inv"] = inv
                h = xhat * p[f"norm{i}.scale"] + p[f"norm{i}.bias"]
            else:
                h = a
            if cache is not None:
                cache.layers.append(layer)
        last = len(self.hidden)
        out = h @ p[f"dense{last}.w"] + p[f"dense{last}.b"]
        if cache is not None:
            cache.output_input = h
        return out

    def _network_backward(self, cache: _Cache, g_out, param_grads: bool):
        """Backpropagate ``g_out = dL/dF`` to the network input ``u``.

        Returns ``(g_u, grads)``; ``grads`` is empty unless ``param_grads``.
        """
        p = self.params
        grads: dict[str, np.ndarray] = {}
        last = len(self.hidden)
        flat = lambda a: a.reshape(-1, a.shape[-1])
        if param_grads:
            grads[f"dense{last}.w"] = flat(cache.output_input).T @ flat(g_out)
            grads[f"dense{last}.b"] = flat(g_out).sum(axis=0)
        g = g_out @ p[f"dense{last}.w"].T
        for i in reversed(range(last)):
            layer = cache.layers[i]
            if self.layer_norm:
                xhat, inv = layer["xhat"], layer["inv"]
                if param_grads:
                    grads[f"norm{i}.scale"] = flat(g * xhat).sum(axis=0)
                    grads[f"norm{i}.bias"] = flat(g).sum(axis=0)
                gx = g * p[f"norm{i}.scale"]
                n = gx.shape[-1]
                g = inv / n * (
                    n * gx
                    - gx.sum(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
                )
            if self.activation == "silu":
                zf, s = layer["zf"], layer["sig"]
                g = g * (s + zf * s * (1.0 - s))
            if self.conditioning == "film":
                z, gamma = layer["z"], layer["gamma"]
                if param_grads:
                    g_gb = np.concatenate([g * z, g], axis=-1)
                    emb = np.broadcast_to(cache.emb, g_gb.shape[:-1] + cache.emb.shape[-1:])
                    grads[f"film{i}.w"] = flat(emb).T @ flat(g_gb)
                    grads[f"film{i}.b"] = flat(g_gb).sum(axis=0)
                g = g * (1.0 + gamma)
            if param_grads:
                grads[f"dense{i}.w"] = flat(layer["h_in"]).T @ flat(g)
                grads[f"dense{i}.b"] = flat(g).sum(axis=0)
            g = g @ p[f"dense{i}.w"].T
        if self.conditioning == "concat":
            g = g[..., : self.dim]
        return g, grads

    def _forward(self, xt, sigma):
        batch_ndim = xt.ndim - 1
        c_skip, c_out, c_in, c_noise = self.preconditioning(sigma)
        col = lambda c: _as_column(c, batch_ndim)
        # sigma is a scalar or matches the batch shape exactly.
        emb = sinusoidal_embedding(c_noise, self.embedding_features)
        cache = _Cache(
            sigma=np.asarray(sigma), c_skip=col(c_skip), c_out=col(c_out), c_in=col(c_in), emb=emb
        )
        net = self._network_forward(cache.c_in * xt, emb, cache)
        cache.net_out = net
        return cache.c_skip * xt + cache.c_out * net, cache

    # -- public surface -----------------------------------------------------

    def linearize(self, xt, sigma):
        xt = self._check(xt)
        self.counter["denoise"] += 1
        out, cache = self._forward(xt, sigma)

        def vjp_fn(v):
            self.counter["vjp"] += 1
            v = np.asarray(v, dtype=float)
            g_u, _ = self._network_backward(cache, cache.c_out * v, param_grads=False)
            return cache.c_skip * v + cache.c_in * g_u

        return out, vjp_fn

    def denoising_loss(self, x0, sigma, noise):
        """Weighted denoising loss and its exact gradient w.r.t. the weights.

        The loss is ``mean_i lambda_i ||d(x0_i + sigma_i noise_i) - x0_i||^2``
        with ``lambda = 1 / c_out^2``.
        """
        x0 = self._check(x0)
        if x0.shape[0] == 0:
            raise ContractError("empty batch")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x0.shape[:1])
        xt = x0 + sigma[:, None] * noise
        _, cache = self._forward(xt, sigma)
        target = (x0 - cache.c_skip * xt) / cache.c_out
        resid = cache.net_out - target
        n = x0.shape[0]
        loss = float(np.sum(resid**2) / n)
        _, grads = self._network_backward(cache, 2.0 * resid / n, param_grads=True)
        return loss, grads
