"""Synthetic multi-view data: random smooth 1D manifolds observed through
random linear projections.

Each source lives on a closed curve in ``R^5`` built from a random Fourier
series. A view mixes the sources through per-sample random ``3 x 5`` matrices
whose rows are uniform on the unit sphere, scaled by a view/source coefficient,
and adds isotropic Gaussian noise.

True source values are stored with each view but are only reachable through
:meth:`Dataset.truth`, which requires ``allow_truth=True``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .denoiser import ContractError
from .io import read_arrays, read_header, write_arrays
from .posterior import Observation

SIGMA_Y = 0.01
KINDS = ("contrastive", "mixed", "mixed-independent")


@dataclass(frozen=True)
class ManifoldSpec:
    """Random closed curve; amplitude of mode ``k`` is ``k ** -smoothness``."""

    ambient_dim: int = 5
    smoothness: int = 3
    seed: int = 0
    n_frequencies: int = 32

    def __post_init__(self):
        if self.smoothness < 1:
            raise ContractError("smoothness must be >= 1")
        if self.ambient_dim < 1 or self.n_frequencies < 1:
            raise ContractError("ambient_dim and n_frequencies must be positive")


class Manifold:
    """Callable ``s in [0, 1) -> R^d`` with unit RMS per coordinate."""

    def __init__(self, spec: ManifoldSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, spec.smoothness, 0x6D616E])
        k = np.arange(1, spec.n_frequencies + 1, dtype=float)
        amp = k ** -float(spec.smoothness)
        a = rng.standard_normal((spec.ambient_dim, spec.n_frequencies)) * amp
        b = rng.standard_normal((spec.ambient_dim, spec.n_frequencies)) * amp
        # Mean square of a cos + b sin over one period is (a^2 + b^2) / 2.
        rms = np.sqrt(0.5 * np.sum(a**2 + b**2, axis=1, keepdims=True))
        self.freq = 2.0 * np.pi * k
        self.cos_coef = a / rms
        self.sin_coef = b / rms

    def __call__(self, s) -> np.ndarray:
        phase = np.asarray(s, dtype=float)[..., None] * self.freq
        return np.cos(phase) @ self.cos_coef.T + np.sin(phase) @ self.sin_coef.T

    def second_derivative(self, s) -> np.ndarray:
        phase = np.asarray(s, dtype=float)[..., None] * self.freq
        w2 = self.freq**2
        return -(np.cos(phase) * w2) @ self.cos_coef.T - (np.sin(phase) * w2) @ self.sin_coef.T


def generate_manifold_sampler(spec: ManifoldSpec) -> Manifold:
    return Manifold(spec)


def sample_mixing_matrix(rng: np.random.Generator, rows: int = 3, cols: int = 5, size=None) -> np.ndarray:
    """Matrix (or stack of matrices) with rows drawn uniformly from the unit sphere."""
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (rows, cols)
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


@dataclass(frozen=True)
class MixingSpec:
    """Which sources appear in which view, and with what weight.

    ``contrastive``: view ``a`` holds sources ``0..a`` with unit weight.
    ``mixed``: source ``a`` has weight 1 in view ``a`` and ``f_mix`` elsewhere,
    all sources sharing one base matrix per sample. ``mixed-independent``: same
    weights, independent matrices per source.
    """

    kind: str = "contrastive"
    n_views: int = 2
    n_sources: int = 2
    f_mix: float = 0.0
    row_dim: int = 3
    source_dim: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if self.n_views < 1 or self.n_sources < 1:
            raise ContractError("n_views and n_sources must be positive")
        if self.kind == "contrastive" and self.n_views != self.n_sources:
            raise ContractError("n_views: contrastive mixing needs n_views == n_sources")
        if not 0.0 <= self.f_mix <= 1.0:
            raise ContractError(f"f_mix: must lie in [0, 1], got {self.f_mix}")
        if self.kind != "contrastive" and self.n_views != self.n_sources:
            raise ContractError("n_views: mixed views are defined per source, need n_views == n_sources")

    def coefficients(self) -> np.ndarray:
        """``(n_views, n_sources)`` weights ``c[a, b]``."""
        a = np.arange(self.n_views)[:, None]
        b = np.arange(self.n_sources)[None, :]
        if self.kind == "contrastive":
            return (b <= a).astype(float)
        return np.where(a == b, 1.0, self.f_mix)


@dataclass
class View:
    """Observations of one view: ``y (n, d_a)``, ``mixing (n, N_s, d_a, d_b)``."""

    view_id: int
    y: np.ndarray
    mixing: np.ndarray
    noise_var: float

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_sources(self) -> int:
        return self.mixing.shape[1]

    def active_sources(self) -> list[int]:
        """Sources with a non-zero mixing matrix for at least one sample."""
        return [b for b in range(self.n_sources) if np.any(self.mixing[:, b] != 0.0)]

    def observation(self, rows=slice(None), sources: Sequence[int] | None = None) -> Observation:
        sources = range(self.n_sources) if sources is None else sources
        idx = np.arange(self.n)[rows]
        return Observation(
            y=self.y[idx],
            mixing=[self.mixing[idx, b] for b in sources],
            noise_cov=self.noise_var,
            view_id=self.view_id,
            sample_id=idx,
        )


def build_view(
    spec: MixingSpec,
    manifolds: Sequence[Callable],
    n: int,
    sigma_y: float,
    rng: np.random.Generator,
    view: int,
) -> tuple[View, np.ndarray]:
    """Draw ``n`` observations of view ``view``; returns the view and true sources ``(n, N_s, d)``."""
    if len(manifolds) != spec.n_sources:
        raise ContractError(f"need {spec.n_sources} manifolds, got {len(manifolds)}")
    if not 0 <= view < spec.n_views:
        raise ContractError(f"view {view} out of range")
    if not sigma_y > 0.0:
        raise ContractError("sigma_y must be positive")
    coef = spec.coefficients()[view]
    s = rng.random((n, spec.n_sources))
    truth = np.stack([m(s[:, b]) for b, m in enumerate(manifolds)], axis=1)
    if spec.kind == "mixed-independent":
        base = sample_mixing_matrix(rng, spec.row_dim, spec.source_dim, size=(n, spec.n_sources))
    else:
        base = np.repeat(sample_mixing_matrix(rng, spec.row_dim, spec.source_dim, size=n)[:, None], spec.n_sources, axis=1)
    mixing = base * coef[None, :, None, None]
    clean = np.einsum("nbij,nbj->ni", mixing, truth)
    y = clean + sigma_y * rng.standard_normal(clean.shape)
    return View(view_id=view, y=y, mixing=mixing, noise_var=float(sigma_y) ** 2), truth


def default_manifold_specs(n_sources: int, seed: int = 0) -> list[ManifoldSpec]:
    """Smoothness 3, 4, 5, ... for sources 1, 2, 3, ..."""
    return [ManifoldSpec(smoothness=3 + b, seed=seed) for b in range(n_sources)]


class Dataset:
    """All views of one experiment. True sources are kept behind :meth:`truth`."""

    def __init__(self, views: Sequence[View], spec: MixingSpec, manifolds: Sequence[ManifoldSpec], seed: int, truth=None):
        self.views = list(views)
        self.spec = spec
        self.manifolds = list(manifolds)
        self.seed = seed
        self._truth = truth

    @property
    def n_sources(self) -> int:
        return self.spec.n_sources

    def truth(self, view: int, allow_truth: bool = False) -> np.ndarray:
        """True sources of ``view`` as ``(n, N_s, d)``; evaluation only."""
        if not allow_truth:
            raise PermissionError("true sources are evaluation-only; pass allow_truth=True")
        if self._truth is None:
            raise LookupError("dataset was loaded without true sources")
        return self._truth[view]

    def restrict(self, views: Sequence[int]) -> "Dataset":
        truth = None if self._truth is None else {v: self._truth[v] for v in views}
        return Dataset([self.views[v] for v in views], self.spec, self.manifolds, self.seed, truth)

    def meta(self) -> dict:
        return {"spec": asdict(self.spec), "manifolds": [asdict(m) for m in self.manifolds], "seed": self.seed}


def generate_dataset(
    spec: MixingSpec,
    n_per_view: int,
    seed: int = 0,
    manifolds: Sequence[ManifoldSpec] | None = None,
    sigma_y: float = SIGMA_Y,
) -> Dataset:
    """Each view gets its own random stream derived from ``(seed, view)``."""
    if n_per_view < 1:
        raise ContractError("n_per_view must be positive")
    manifolds = list(manifolds) if manifolds is not None else default_manifold_specs(spec.n_sources, seed)
    curves = [generate_manifold_sampler(m) for m in manifolds]
    views, truth = [], {}
    for a in range(spec.n_views):
        rng = np.random.default_rng([seed, a, 0x64617461])
        view, x = build_view(spec, curves, n_per_view, sigma_y, rng, a)
        views.append(view)
        truth[a] = x
    return Dataset(views, spec, manifolds, seed, truth)


def sample_truth_prior(spec: ManifoldSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh draws from a source distribution, for prior-quality metrics."""
    return generate_manifold_sampler(spec)(rng.random(n))


# ---------------------------------------------------------------------------
# Persistence


def view_path(directory, view: int) -> Path:
    return Path(directory) / f"view_{view}.ddp"


def save_dataset(dataset: Dataset, directory, fmt: str = "binary") -> list[Path]:
    paths = []
    for v in dataset.views:
        meta = dataset.meta()
        meta.update({"view": v.view_id, "n": v.n, "noise_var": v.noise_var})
        arrays = {"y": v.y, "mixing": v.mixing}
        if dataset._truth is not None:
            arrays["truth"] = dataset._truth[v.view_id]
        path = view_path(directory, v.view_id)
        write_arrays(path, "view", meta, arrays, fmt=fmt)
        paths.append(path)
    return paths


def load_dataset(directory, allow_truth: bool = False) -> Dataset:
    """Load every ``view_*.ddp`` file. True sources are read only with ``allow_truth``."""
    paths = sorted(Path(directory).glob("view_*.ddp"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no view files in {directory}")
    views, truth, meta = [], {} if allow_truth else None, None
    for p in paths:
        header = read_header(p)
        if header["kind"] != "view":
            raise ContractError(f"{p} is not a view file")
        meta = header["meta"]
        names = ["y", "mixing"] + (["truth"] if allow_truth else [])
        arrays = read_arrays(p, names, header=header)
        views.append(View(meta["view"], arrays["y"], arrays["mixing"], float(meta["noise_var"])))
        if allow_truth:
            truth[meta["view"]] = arrays["truth"]
    spec = MixingSpec(**meta["spec"])
    manifolds = [ManifoldSpec(**m) for m in meta["manifolds"]]
    return Dataset(views, spec, manifolds, meta["seed"], truth)
