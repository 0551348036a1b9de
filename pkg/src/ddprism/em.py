"""Monte-Carlo expectation maximization over per-source diffusion priors.

* :func:`gaussian_init` fits Gaussian priors with a short EM loop whose E-step
  is exact when every prior in a view is Gaussian.
* :func:`run_em_joint` updates every source each lap from joint posterior
  samples of all views.
* :func:`run_em_contrastive` handles views ordered so that view ``a`` holds
  sources ``0..a``: source ``a`` is learned on view ``a`` with the earlier
  sources frozen.

A source whose mixing matrices are identically zero in a view is left out of
that view's posterior; it carries no information there.

Every random draw comes from a stream keyed by ``(seed, stage, lap, purpose,
...)``, so a run resumed from a lap checkpoint continues exactly as an
uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from functools import partial
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, View
from .denoiser import ContractError, Denoiser, GaussianDenoiser, MLPDenoiser, fit_gaussian
from .gibbs import GibbsConfig, gibbs_sample
from .io import load_checkpoint, read_arrays, save_checkpoint, write_arrays
from .posterior import (
    CGError,
    SamplerConfig,
    SamplingError,
    gaussian_joint_posterior,
    pc_sample_posterior,
    split_blocks,
)
from .training import TrainConfig, TrainState, train_lap

log = logging.getLogger(__name__)

# Purpose codes for random streams.
_E_STEP, _M_STEP, _INIT_E, _INIT_PRIOR, _MLP_INIT, _PROMOTE = 1, 2, 3, 4, 5, 6


class EStepError(RuntimeError):
    """Raised when too many observations fail in one E-step."""


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


@dataclass(frozen=True)
class EMConfig:
    """EM schedule and the budgets of its inner steps.

    ``laps`` holds one lap count per stage: a single entry for joint EM, one
    per source for contrastive EM. ``init_sampler`` is used by the Gaussian
    initialization when a view also contains non-Gaussian (frozen) sources;
    it defaults to ``sampler``.
    """

    laps: tuple = (16,)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    init_gaussian_laps: int = 16
    init_sampler: SamplerConfig | None = None
    strategy: str = "joint"
    gibbs: GibbsConfig | None = None
    samples_per_observation: int = 1
    chunk_size: int = 4096
    max_failure_rate: float = 0.01
    mlp: dict = field(default_factory=lambda: {"hidden": (256, 256, 256), "embedding_features": 64, "conditioning": "concat"})
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "laps", tuple(int(k) for k in np.atleast_1d(self.laps)))
        if any(k < 1 for k in self.laps) or not self.laps:
            raise ContractError("laps: every stage needs at least one lap")
        if self.init_gaussian_laps < 0:
            raise ContractError("init_gaussian_laps must be >= 0")
        if self.strategy not in ("joint", "gibbs"):
            raise ContractError(f"strategy: must be 'joint' or 'gibbs', got {self.strategy!r}")
        if self.strategy == "gibbs" and self.gibbs is None:
            object.__setattr__(self, "gibbs", GibbsConfig())
        if self.samples_per_observation < 1 or self.chunk_size < 1:
            raise ContractError("samples_per_observation and chunk_size must be positive")
        if not 0.0 <= self.max_failure_rate < 1.0:
            raise ContractError("max_failure_rate must lie in [0, 1)")

    @property
    def schedule(self):
        return self.sampler.schedule

    def stage_laps(self, index: int) -> int:
        """Lap count of stage ``index`` (0-based); the last entry repeats."""
        return self.laps[min(index, len(self.laps) - 1)]

    def snapshot(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


def make_mlp(config: EMConfig, dim: int, stage: int, source: int) -> MLPDenoiser:
    rng = stream(config.seed, stage, 0, _MLP_INIT, source)
    return MLPDenoiser(dim, rng=rng, **config.mlp)


# ---------------------------------------------------------------------------
# Run bookkeeping


class RunRecorder:
    """Append-only manifest plus lap checkpoints, optionally on disk.

    Layout under ``run_dir``: ``manifest.json``, ``metrics.csv``,
    ``init_<stage>/{gaussian,source}_<b>.ckpt`` and
    ``lap_<k>/source_<b>.ckpt``. Lap numbers are global across stages and
    start at 1. The manifest holds no timings so that reruns reproduce it
    exactly; wall-clock times go to ``metrics.csv``.
    """

    METRIC_FIELDS = ("lap", "stage", "source", "kind", "sinkhorn", "psnr", "wall_clock")

    def __init__(self, run_dir=None, config: dict | None = None, notes: dict | None = None, evaluator: Callable | None = None):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.evaluator = evaluator
        self.manifest = {"format_version": 1, "config": config or {}, "notes": notes or {}, "init": [], "laps": [], "status": "running"}
        self.metrics: list[dict] = []
        self._t0 = time.perf_counter()

    @classmethod
    def resume(cls, run_dir, evaluator=None) -> "RunRecorder":
        rec = cls(run_dir, evaluator=evaluator)
        rec.manifest = json.loads((rec.run_dir / "manifest.json").read_text())
        path = rec.run_dir / "metrics.csv"
        if path.exists():
            with open(path, newline="") as fh:
                rec.metrics = list(csv.DictReader(fh))
        return rec

    def _write_manifest(self):
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            tmp = self.run_dir / "manifest.json.tmp"
            tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
            tmp.replace(self.run_dir / "manifest.json")

    def _write_metrics(self, rows):
        self.metrics.extend(rows)
        if self.run_dir is None or not rows:
            return
        path = self.run_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.METRIC_FIELDS, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerows(rows)

    def _save_models(self, sub: str, models: dict, prefix: str = "source", schedule=None) -> dict:
        if self.run_dir is None:
            return {}
        paths = {}
        for b, m in sorted(models.items()):
            rel = f"{sub}/{prefix}_{b}.ckpt"
            save_checkpoint(self.run_dir / rel, m, schedule)
            paths[str(b)] = rel
        return paths

    def _save_state(self, sub: str, entry: dict, gibbs_state):
        if gibbs_state is not None and self.run_dir is not None:
            arrays = {f"v{v}_s{b}": x for (v, b), x in gibbs_state.items()}
            write_arrays(self.run_dir / sub / "gibbs_state.ddp", "gibbs-state", {}, arrays)
            entry["gibbs_state"] = f"{sub}/gibbs_state.ddp"

    def init_done(self, stage: int, gaussians: dict, models: dict, schedule, record: dict, gibbs_state=None):
        sub = f"init_{stage}"
        entry = {"stage": stage, **record}
        entry["gaussian_checkpoints"] = self._save_models(sub, gaussians, "gaussian", schedule)
        entry["checkpoints"] = self._save_models(sub, models, "source", schedule)
        entry["checksums"] = {str(b): m.checksum() for b, m in sorted(models.items())}
        self._save_state(sub, entry, gibbs_state)
        self.manifest["init"].append(entry)
        self._write_manifest()

    def lap_done(self, stage: int, lap: int, models: dict, schedule, record: dict, estep=None, gibbs_state=None):
        sub = f"lap_{lap}"
        entry = {"stage": stage, "lap": lap, **record}
        entry["checkpoints"] = self._save_models(sub, models, "source", schedule)
        entry["checksums"] = {str(b): m.checksum() for b, m in sorted(models.items())}
        self._save_state(sub, entry, gibbs_state)
        self.manifest["laps"].append(entry)
        self._write_manifest()
        if self.evaluator is not None:
            rows = self.evaluator(stage=stage, lap=lap, models=models, estep=estep) or []
            clock = time.perf_counter() - self._t0
            for r in rows:
                r.setdefault("lap", lap)
                r.setdefault("stage", stage)
                r.setdefault("wall_clock", round(clock, 3))
            self._write_metrics(rows)

    def finish(self):
        self.manifest["status"] = "complete"
        self._write_manifest()

    # -- resume helpers -----------------------------------------------------

    def completed_laps(self, stage: int) -> list[dict]:
        return [e for e in self.manifest["laps"] if e["stage"] == stage]

    def init_entry(self, stage: int) -> dict | None:
        for e in self.manifest["init"]:
            if e["stage"] == stage:
                return e
        return None

    def load_models(self, paths: dict) -> dict:
        return {int(b): load_checkpoint(self.run_dir / p)[0] for b, p in paths.items()}

    def load_gibbs_state(self, entry: dict) -> dict | None:
        if "gibbs_state" not in entry:
            return None
        arrays = read_arrays(self.run_dir / entry["gibbs_state"])
        out = {}
        for k, x in arrays.items():
            v, b = k[1:].split("_s")
            out[(int(v), int(b))] = x
        return out


# ---------------------------------------------------------------------------
# E-step


@dataclass
class EStepResult:
    """Posterior samples keyed by ``(view, source)``, rows aligned with the view.

    With ``m`` samples per observation the rows are ``m`` stacked copies of the
    view. ``failed[view]`` marks observations whose sampling failed; their
    rows are NaN.
    """

    samples: dict
    failed: dict
    stats: dict = field(default_factory=dict)

    def training_set(self, source: int) -> np.ndarray:
        parts = []
        for (v, b), x in sorted(self.samples.items()):
            if b != source:
                continue
            m = x.shape[0] // self.failed[v].size
            ok = ~np.tile(self.failed[v], m)
            parts.append(x[ok])
        if not parts:
            raise ContractError(f"source {source} is not observed in any view")
        return np.concatenate(parts)


def _exact_gaussian_draw(obs, priors, rng):
    mean, cov = gaussian_joint_posterior(obs, priors)
    d = cov.shape[-1]
    scale = np.trace(cov, axis1=-2, axis2=-1)[..., None, None] / d
    for jitter in (0.0, 1e-10, 1e-7):
        try:
            L = np.linalg.cholesky(cov + jitter * scale * np.eye(d))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise np.linalg.LinAlgError("posterior covariance is not positive definite after jitter")
    z = rng.standard_normal(mean.shape)
    return split_blocks(mean + (L @ z[..., None])[..., 0], [p.dim for p in priors])


def _draw_rows(view: View, rows, sources, models, strategy, config, rng, init, diagnostics):
    obs = view.observation(rows, sources)
    ms = [models[b] for b in sources]
    if strategy == "exact":
        return _exact_gaussian_draw(obs, ms, rng)
    hook = None
    if diagnostics is not None:
        hook = lambda step, info: diagnostics(view=view.view_id, sample_ids=obs.sample_id, step=step, info=info)
    if strategy == "gibbs" and len(sources) > 1:
        return gibbs_sample(obs, ms, [init[b] for b in sources], config, rng, diagnostics=hook)
    if strategy == "gibbs":
        # A lone source has no conditioning partner: every sweep is an
        # independent draw, so one sweep gives the same distribution.
        config = config.sampler
    return pc_sample_posterior(obs, ms, config, rng, diagnostics=hook)


def _draw_robust(view, rows, sources, models, strategy, config, rng, init, diagnostics, failed):
    """Sample ``rows``; on failure bisect until the failing rows are isolated."""
    try:
        return _draw_rows(view, rows, sources, models, strategy, config, rng, init, diagnostics)
    except (CGError, SamplingError, np.linalg.LinAlgError) as err:
        if rows.size == 1:
            log.warning("observation %d of view %d failed: %s", rows[0], view.view_id, err)
            failed[rows[0] % failed.size] = True
            return [np.full((1, models[b].dim), np.nan) for b in sources]
        half = rows.size // 2
        r1, r2 = rng.spawn(2)
        parts = []
        for sub, r in ((rows[:half], r1), (rows[half:], r2)):
            sub_init = None if init is None else {b: x[np.searchsorted(rows, sub)] for b, x in init.items()}
            parts.append(_draw_robust(view, sub, sources, models, strategy, config, r, sub_init, diagnostics, failed))
        return [np.concatenate(p) for p in zip(*parts)]


def e_step(
    views: Sequence[View],
    view_sources: Sequence[Sequence[int]],
    models: dict,
    config: EMConfig,
    key: tuple,
    strategy: str | None = None,
    sampler=None,
    gibbs_state: dict | None = None,
    diagnostics: Callable | None = None,
) -> EStepResult:
    """One posterior draw of the listed sources for every observation.

    ``strategy`` is ``joint``, ``gibbs`` or ``exact`` (closed form, Gaussian
    priors only). Gibbs chains start from ``gibbs_state`` when given.
    """
    strategy = strategy or config.strategy
    if diagnostics is not None:
        diagnostics = partial(diagnostics, key=key)
    if sampler is None:
        sampler = config.gibbs if strategy == "gibbs" else config.sampler
    m = config.samples_per_observation
    samples, failed = {}, {}
    evals = 0.0
    n_total = 0
    for view, sources in zip(views, view_sources):
        n = view.n
        fail = np.zeros(n, dtype=bool)
        rows_all = np.tile(np.arange(n), m)
        out = {b: np.empty((n * m, models[b].dim)) for b in sources}
        for c, lo in enumerate(range(0, n * m, config.chunk_size)):
            rows = rows_all[lo : lo + config.chunk_size]
            rng = stream(config.seed, *key, view.view_id, c)
            init = None
            if strategy == "gibbs":
                if gibbs_state is None:
                    raise ContractError("gibbs E-step needs initial source values")
                init = {b: gibbs_state[(view.view_id, b)][lo : lo + rows.size] for b in sources}
            before = sum(sum(models[b].counter.values()) for b in sources)
            draws = _draw_robust(view, rows, sources, models, strategy, sampler, rng, init, diagnostics, fail)
            evals += (sum(sum(models[b].counter.values()) for b in sources) - before) * rows.size
            for b, x in zip(sources, draws):
                out[b][lo : lo + rows.size] = x
        n_total += n * m
        for b in sources:
            out[b][np.tile(fail, m)] = np.nan
            samples[(view.view_id, b)] = out[b]
        failed[view.view_id] = fail
        rate = fail.mean()
        if rate > config.max_failure_rate:
            raise EStepError(f"E-step {key}: {fail.sum()} of {n} observations failed in view {view.view_id}")
    stats = {
        "failed": int(sum(f.sum() for f in failed.values())),
        "evaluations_per_observation": evals / max(n_total, 1),
    }
    return EStepResult(samples, failed, stats)


# ---------------------------------------------------------------------------
# M-step


def m_step(models: dict, estep: EStepResult, trainable: Sequence[int], config: EMConfig, key: tuple) -> dict:
    """Train each source in ``trainable`` on its own samples with a fresh optimizer."""
    losses = {}
    for b in trainable:
        data = estep.training_set(b)
        state = TrainState.fresh(models[b], config.train)
        train_lap(state, models[b], data, config.train, config.schedule, stream(config.seed, *key, _M_STEP, b))
        tail = state.losses[-min(len(state.losses), 100) :]
        losses[str(b)] = float(np.mean(tail))
    return losses


# ---------------------------------------------------------------------------
# Gaussian initialization


def _view_sources(dataset: Dataset, views: Sequence[int], allowed: Sequence[int]) -> list[list[int]]:
    active = [[b for b in dataset.views[v].active_sources() if b in allowed] for v in views]
    return active


def gaussian_init(
    dataset: Dataset,
    views: Sequence[int],
    view_sources: Sequence[Sequence[int]],
    init_sources: Sequence[int],
    fixed: dict,
    config: EMConfig,
    stage: int,
) -> tuple[dict, EStepResult]:
    """Fit Gaussian priors for ``init_sources`` by EM; ``fixed`` models stay put.

    Returns the fitted priors and one posterior draw per observation under
    them. With zero laps the priors are standard normal and the draws come
    from that prior.
    """
    vs = [dataset.views[v] for v in views]
    dims = {b: dataset.spec.source_dim for b in init_sources}
    gauss = {b: GaussianDenoiser(np.zeros(d), np.eye(d)) for b, d in dims.items()}
    if config.init_gaussian_laps == 0:
        samples, failed = {}, {}
        for view, sources in zip(vs, view_sources):
            failed[view.view_id] = np.zeros(view.n, dtype=bool)
            for b in sources:
                if b in gauss:
                    rng = stream(config.seed, stage, 0, _INIT_PRIOR, view.view_id, b)
                    samples[(view.view_id, b)] = gauss[b].sample(rng, view.n * config.samples_per_observation)
        return gauss, EStepResult(samples, failed, {"failed": 0})

    sampler = config.init_sampler or config.sampler
    strat = "exact" if not fixed else "joint"

    def draw(lap):
        models = {**fixed, **gauss}
        return e_step(vs, view_sources, models, config, (stage, lap, _INIT_E), strategy=strat, sampler=sampler)

    for lap in range(config.init_gaussian_laps):
        res = draw(lap)
        gauss = {b: fit_gaussian(res.training_set(b)) for b in init_sources}
    return gauss, draw(config.init_gaussian_laps)


def promote(gauss_samples: EStepResult, init_sources, config: EMConfig, stage: int, dim: int) -> dict:
    """Fresh MLPs trained for one lap on the Gaussian-posterior samples."""
    models = {b: make_mlp(config, dim, stage, b) for b in init_sources}
    m_step(models, gauss_samples, init_sources, config, (stage, 0, _PROMOTE))
    return models


# ---------------------------------------------------------------------------
# EM loops


def _em_loop(dataset, views, view_sources, models, trainable, config, stage, n_laps, lap_offset, start, recorder, gibbs_state, diagnostics):
    vs = [dataset.views[v] for v in views]
    frozen = {b: models[b].checksum() for b in models if b not in trainable}
    if config.strategy != "gibbs":
        gibbs_state = None
    for k in range(start, n_laps):
        key = (stage, k + 1, _E_STEP)
        try:
            res = e_step(vs, view_sources, models, config, key, gibbs_state=gibbs_state, diagnostics=diagnostics)
        except EStepError as err:
            raise EStepError(f"stage {stage} lap {k + 1}: {err}") from err
        if gibbs_state is not None:
            gibbs_state = {kk: np.where(np.isnan(x), gibbs_state[kk], x) for kk, x in res.samples.items()}
        losses = m_step(models, res, trainable, config, (stage, k + 1))
        for b, c in frozen.items():
            if models[b].checksum() != c:
                raise RuntimeError(f"frozen source {b} changed during stage {stage}")
        record = {
            "trained": list(trainable),
            "loss": losses,
            "e_step": res.stats,
            "sigma_data": {str(b): models[b].sigma_data for b in trainable},
        }
        if recorder is not None:
            recorder.lap_done(stage, lap_offset + k + 1, dict(models), config.schedule, record, estep=res, gibbs_state=gibbs_state)
    return models


def _start_stage(dataset, views, view_sources, init_sources, fixed, config, stage, recorder):
    """Models, first lap and Gibbs state for ``stage``; resumes from ``recorder`` when possible."""
    if recorder is not None and recorder.run_dir is not None:
        done = recorder.completed_laps(stage)
        entry = done[-1] if done else recorder.init_entry(stage)
        if entry is not None:
            return recorder.load_models(entry["checkpoints"]), len(done), recorder.load_gibbs_state(entry)
    gauss, res = gaussian_init(dataset, views, view_sources, init_sources, fixed, config, stage)
    models = {**fixed, **promote(res, init_sources, config, stage, dataset.spec.source_dim)}
    state = res.samples if config.strategy == "gibbs" else None
    if recorder is not None:
        record = {"sources": list(init_sources), "gaussian_laps": config.init_gaussian_laps, "e_step": res.stats}
        recorder.init_done(stage, gauss, models, config.schedule, record, gibbs_state=state)
    return models, 0, state


def observed_sources(dataset: Dataset, views: Sequence[int]) -> list[int]:
    return sorted(set().union(*(dataset.views[v].active_sources() for v in views)))


def run_em_joint(
    dataset: Dataset,
    config: EMConfig,
    models: dict | None = None,
    recorder: RunRecorder | None = None,
    diagnostics=None,
) -> dict:
    """All observed sources learned together from all views.

    Without ``models`` the priors are initialized by :func:`gaussian_init`
    and promoted to MLPs. A recorder holding completed laps resumes the run.
    """
    views = list(range(len(dataset.views)))
    sources = observed_sources(dataset, views)
    view_sources = _view_sources(dataset, views, sources)
    stage = 1
    if models is None:
        models, start, state = _start_stage(dataset, views, view_sources, sources, {}, config, stage, recorder)
    else:
        start, state = 0, None
        if config.strategy == "gibbs":
            state = gaussian_init(dataset, views, view_sources, sources, {}, config, stage)[1].samples
    models = _em_loop(
        dataset, views, view_sources, dict(models), sources, config, stage, config.laps[0], 0, start, recorder, state, diagnostics
    )
    if recorder is not None:
        recorder.finish()
    return models


def check_triangular(dataset: Dataset):
    for v, view in enumerate(dataset.views):
        extra = [b for b in view.active_sources() if b > v]
        if extra:
            raise ContractError(f"view {v} contains sources {extra}; contrastive EM needs sources 0..{v} only")


def run_em_contrastive(
    dataset: Dataset,
    config: EMConfig,
    models: dict | None = None,
    recorder: RunRecorder | None = None,
    diagnostics=None,
    n_stages: int | None = None,
) -> dict:
    """Sources learned one view at a time; earlier sources stay frozen.

    ``models`` may hold already trained sources ``0..a-1``, in which case
    learning starts at stage ``a``. ``n_stages`` stops after that many views.
    """
    check_triangular(dataset)
    models = dict(models or {})
    n_stages = dataset.n_sources if n_stages is None else n_stages
    lap_offset = 0
    for a in range(n_stages):
        stage = a + 1
        n_laps = config.stage_laps(a)
        if a in models:
            lap_offset += n_laps
            continue
        views = [a]
        view_sources = _view_sources(dataset, views, list(range(a + 1)))
        if a not in view_sources[0]:
            raise ContractError(f"source {a} is not observed in view {a}")
        fixed = {b: models[b] for b in view_sources[0] if b != a}
        stage_models, start, state = _start_stage(dataset, views, view_sources, [a], fixed, config, stage, recorder)
        stage_models = {**stage_models, **fixed}
        stage_models = _em_loop(
            dataset, views, view_sources, stage_models, [a], config, stage, n_laps, lap_offset, start, recorder, state, diagnostics
        )
        models[a] = stage_models[a]
        lap_offset += n_laps
    if recorder is not None:
        recorder.finish()
    return models
