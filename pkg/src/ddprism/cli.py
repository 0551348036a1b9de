"""Command-line front end: ``gen-data``, ``train``, ``sample`` and ``metrics``.

A run is described by one JSON file. Its ``experiment`` field picks a preset
(``contrastive-1d`` or ``mixed-1d``) whose values the file then overrides;
``--set section.key=value`` flags override the file. The merged configuration
is written into the run manifest.

Outputs go under ``--output-root``, else ``$DDPRISM_OUTPUT_ROOT``, else
``./outputs``: datasets in ``data/<name>/`` and runs in ``runs/<name>/``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ManifoldSpec, MixingSpec, generate_dataset, generate_manifold_sampler, load_dataset, save_dataset
from .denoiser import ContractError
from .em import EMConfig, RunRecorder, run_em_contrastive, run_em_joint, stream
from .experiments import TruthEvaluator
from .gibbs import GibbsConfig
from .io import FormatError, load_checkpoint, read_arrays, read_header, write_arrays
from .metrics import SinkhornConfig, psnr, report_psnr, sinkhorn_divergence
from .posterior import SamplerConfig, pc_sample_posterior, pc_sample_prior
from .sde import NoiseSchedule
from .training import TrainConfig

log = logging.getLogger("ddprism")

ENV_ROOT = "DDPRISM_OUTPUT_ROOT"
_SAMPLE = 8

_COMMON = {
    "train": {"steps": 65_536, "batch_size": 1024, "clip_norm": 1.0, "ema_decay": None},
    "gibbs": {"gibbs_rounds": 64, "pc_steps": 256},
    "em": {"samples_per_observation": 1, "chunk_size": 4096, "max_failure_rate": 0.01},
    "sinkhorn": {"epsilon": 0.01, "max_iters": 500, "tol": 1e-3, "scaling": 0.9},
    "eval": {"n_prior": 16_384, "pc_steps": 256, "n_posterior": 16_384},
    "seed": 0,
    "format": "binary",
}

PRESETS = {
    "contrastive-1d": {
        "algorithm": "contrastive",
        "data": {"kind": "contrastive", "n_views": 3, "n_sources": 3, "f_mix": 0.0, "n_per_view": 65_536, "sigma_y": 0.01, "smoothness": [3, 4, 5]},
        "em": {"laps": [16, 32, 64], "init_gaussian_laps": 16},
        "train": {"lr_init": 1e-3, "lr_final": 1e-6},
        "sampler": {"pc_steps": 16_384, "corrections_per_step": 1, "tau": 0.1, "cg_max_iters": 3, "cg_regularization": 0.0, "cg_denominator_min": 0.0, "sigma_min": 1e-3, "sigma_max": 10.0},
        "mlp": {"hidden": [256, 256, 256], "embedding_features": 64, "conditioning": "concat"},
    },
    "mixed-1d": {
        "algorithm": "joint",
        "data": {"kind": "mixed", "n_views": 2, "n_sources": 2, "f_mix": 0.1, "n_per_view": 65_536, "sigma_y": 0.01, "smoothness": [3, 4]},
        "em": {"laps": [70], "init_gaussian_laps": 8192},
        "train": {"lr_init": 1e-4, "lr_final": 1e-5},
        "sampler": {"pc_steps": 16_384, "corrections_per_step": 1, "tau": 0.08, "cg_max_iters": 3, "cg_regularization": 1e-3, "cg_denominator_min": 1e-3, "sigma_min": 5e-3, "sigma_max": 15.0},
        "mlp": {"hidden": [256, 256, 256], "embedding_features": 128, "conditioning": "film"},
    },
}
PRESETS["custom"] = copy.deepcopy(PRESETS["contrastive-1d"])


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


def _merge(base: dict, over: dict, path: str = "", strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if strict and k not in out and path:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, where + ".", strict)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(raw: dict, overrides=(), **flags) -> dict:
    """Preset, then file values, then ``--set`` overrides, then named flags."""
    kind = raw.get("experiment", "custom")
    if kind not in PRESETS:
        raise ConfigError(f"experiment: must be one of {sorted(PRESETS)}, got {kind!r}")
    base = _merge(_COMMON, PRESETS[kind], strict=False)
    base.update({"experiment": kind, "name": raw.get("name", kind), "output_root": None})
    allowed = set(base)
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"{k}: unknown field")
    cfg = _merge(base, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        node, parts = cfg, key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"{key}: unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = _parse_value(value)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    return cfg


@dataclass
class RunConfig:
    """Validated objects built from an effective configuration dictionary."""

    raw: dict
    mixing: MixingSpec
    manifolds: list
    n_per_view: int
    sigma_y: float
    em: EMConfig
    sinkhorn: SinkhornConfig
    algorithm: str
    root: Path

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def data_dir(self) -> Path:
        return self.root / "data" / self.name

    @property
    def run_dir(self) -> Path:
        return self.root / "runs" / self.name


def _build(factory, section: str, values: dict):
    try:
        return factory(**values)
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from err
    except ContractError as err:
        raise ConfigError(f"{section}.{err}") from err
    except ValueError as err:
        raise ConfigError(f"{section}: {err}") from err


def build_run_config(cfg: dict, strategy: str | None = None) -> RunConfig:
    d = cfg["data"]
    mixing = _build(
        MixingSpec, "data", {"kind": d["kind"], "n_views": d["n_views"], "n_sources": d["n_sources"], "f_mix": float(d["f_mix"])}
    )
    smooth = list(d["smoothness"])
    if len(smooth) < mixing.n_sources:
        raise ConfigError(f"data.smoothness: need {mixing.n_sources} entries, got {len(smooth)}")
    manifolds = [_build(ManifoldSpec, "data.smoothness", {"smoothness": int(s), "seed": int(cfg["seed"])}) for s in smooth[: mixing.n_sources]]
    if not (isinstance(d["n_per_view"], int) and d["n_per_view"] > 0):
        raise ConfigError("data.n_per_view: must be a positive integer")
    if not float(d["sigma_y"]) > 0.0:
        raise ConfigError("data.sigma_y: must be positive")

    s = dict(cfg["sampler"])
    schedule = _build(NoiseSchedule, "sampler", {"sigma_min": s.pop("sigma_min"), "sigma_max": s.pop("sigma_max")})
    sampler = _build(SamplerConfig, "sampler", {**s, "schedule": schedule})
    train = _build(TrainConfig, "train", cfg["train"])
    g = dict(cfg["gibbs"])
    gibbs = _build(GibbsConfig, "gibbs", {"gibbs_rounds": g["gibbs_rounds"], "sampler": replace(sampler, pc_steps=int(g["pc_steps"]))})
    algorithm = cfg["algorithm"]
    e_strategy = "joint"
    if strategy == "gibbs":
        e_strategy = "gibbs"
    elif strategy in ("joint", "contrastive"):
        algorithm = strategy
    elif strategy is not None:
        raise ConfigError(f"--strategy: unknown value {strategy!r}")
    if algorithm not in ("joint", "contrastive"):
        raise ConfigError(f"algorithm: must be 'joint' or 'contrastive', got {algorithm!r}")
    if algorithm == "contrastive" and mixing.kind != "contrastive":
        raise ConfigError("algorithm: contrastive training needs data.kind = 'contrastive'")
    mlp = dict(cfg["mlp"])
    mlp["hidden"] = tuple(int(h) for h in mlp["hidden"])
    em = _build(
        EMConfig,
        "em",
        {
            **cfg["em"],
            "laps": tuple(cfg["em"]["laps"]),
            "train": train,
            "sampler": sampler,
            "strategy": e_strategy,
            "gibbs": gibbs,
            "mlp": mlp,
            "seed": int(cfg["seed"]),
        },
    )
    if algorithm == "contrastive" and len(em.laps) < mixing.n_sources:
        raise ConfigError(f"em.laps: contrastive training needs {mixing.n_sources} entries")
    sinkhorn = _build(SinkhornConfig, "sinkhorn", cfg["sinkhorn"])
    ev = cfg["eval"]
    for k in ("n_prior", "pc_steps", "n_posterior"):
        if not (isinstance(ev.get(k), int) and ev[k] > 0):
            raise ConfigError(f"eval.{k}: must be a positive integer")
    if cfg.get("format") not in ("binary", "json"):
        raise ConfigError("format: must be 'binary' or 'json'")
    root = Path(cfg.get("output_root") or os.environ.get(ENV_ROOT) or "outputs")
    return RunConfig(cfg, mixing, manifolds, d["n_per_view"], float(d["sigma_y"]), em, sinkhorn, algorithm, root)


def _load_config(args) -> tuple[dict, RunConfig]:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = effective_config(raw, args.set or (), seed=args.seed, name=args.name, output_root=args.output_root)
    return cfg, build_run_config(cfg, getattr(args, "strategy", None))


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cfg, rc = _load_config(args)
    ds = generate_dataset(rc.mixing, rc.n_per_view, seed=rc.em.seed, manifolds=rc.manifolds, sigma_y=rc.sigma_y)
    paths = save_dataset(ds, rc.data_dir, fmt=cfg["format"])
    for p in paths:
        print(p)
    return 0


def _plan(rc: RunConfig, ds_views: list) -> dict:
    em = rc.em
    per_traj = em.sampler.evaluations_per_trajectory()
    if em.strategy == "gibbs":
        per_traj = em.gibbs.gibbs_rounds * em.gibbs.sampler.evaluations_per_trajectory()
    n_obs = rc.n_per_view * em.samples_per_observation
    stages = rc.mixing.n_sources if rc.algorithm == "contrastive" else 1
    laps = [em.stage_laps(a) for a in range(stages)]
    return {
        "algorithm": rc.algorithm,
        "e_step_strategy": em.strategy,
        "stages": stages,
        "laps_per_stage": laps,
        "total_laps": int(sum(laps)),
        "observations_per_view": n_obs,
        "score_evaluations_per_trajectory": per_traj,
        "training_steps_per_lap": em.train.steps,
        "batch_size": em.train.batch_size,
        "gaussian_init_laps": em.init_gaussian_laps,
        "run_dir": str(rc.run_dir),
        "data_dir": str(rc.data_dir),
    }


def _notes() -> dict:
    return {
        "loss_weight": "lambda(sigma) = 1 / c_out(sigma)^2 (EDM preconditioning, sigma_data = RMS of E-step samples)",
        "cg_denominator_min": "lower clamp on p^T A p in the CG step size",
        "corrector_step": "eps = 2 (tau * mean||z|| / mean||s||)^2, norms averaged over the batch",
        "promotion": "one full training lap on the Gaussian-posterior samples",
        "gibbs_order": "fixed cyclic order; every inner chain starts from fresh t=1 noise",
        "ema": "off unless train.ema_decay is set",
        "inactive_sources": "sources with all-zero mixing in a view are left out of that view's posterior",
    }


class _NdjsonSink:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "a")

    def __call__(self, key, view, sample_ids, step, info):
        ids = np.atleast_1d(sample_ids)
        iters = np.broadcast_to(info["iterations"], ids.shape)
        resid = np.broadcast_to(info["residual"], ids.shape)
        extra = {k: info[k] for k in ("round", "source") if k in info}
        for i, n, r in zip(ids, iters, resid):
            rec = {"stage": key[0], "lap": key[1], "view": view, "observation": int(i), "step": step, "iterations": int(n), "residual": float(r), **extra}
            self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()


def cmd_train(args) -> int:
    cfg, rc = _load_config(args)
    if args.allow_truth is False and args.eval_truth:
        raise ConfigError("--eval-truth reads true sources; add --allow-truth to confirm")
    plan = _plan(rc, [])
    if args.dry_run:
        print(json.dumps({"config": cfg, "plan": plan}, indent=2, sort_keys=True))
        return 0
    try:
        ds = load_dataset(rc.data_dir, allow_truth=bool(args.eval_truth))
    except FileNotFoundError as err:
        raise ConfigError(f"{err}; run gen-data first") from err
    evaluator = None
    if args.eval_truth:
        ev = cfg["eval"]
        evaluator = TruthEvaluator(
            ds,
            n_prior=ev["n_prior"],
            sampler=replace(rc.em.sampler, pc_steps=ev["pc_steps"]),
            sinkhorn=rc.sinkhorn,
            n_posterior=ev["n_posterior"],
            seed=rc.em.seed,
        )
    manifest_path = rc.run_dir / "manifest.json"
    if args.resume:
        if not manifest_path.exists():
            raise ConfigError(f"--resume: no manifest in {rc.run_dir}")
        recorder = RunRecorder.resume(rc.run_dir, evaluator=evaluator)
        if recorder.manifest["config"] != json.loads(json.dumps(cfg)):
            raise ConfigError("--resume: configuration differs from the recorded run")
    else:
        if manifest_path.exists():
            raise ConfigError(f"{rc.run_dir} already holds a run; use --resume or another --name")
        recorder = RunRecorder(rc.run_dir, cfg, notes=_notes(), evaluator=evaluator)
        recorder.manifest["plan"] = plan
    sink = _NdjsonSink(rc.run_dir / "cg_diagnostics.ndjson") if args.cg_diagnostics else None
    try:
        if rc.algorithm == "contrastive":
            run_em_contrastive(ds, rc.em, recorder=recorder, diagnostics=sink)
        else:
            run_em_joint(ds, rc.em, recorder=recorder, diagnostics=sink)
    finally:
        if sink is not None:
            sink.close()
    print(rc.run_dir)
    return 0


def _run_models(run_dir: Path, lap: str | None):
    """Models of one lap (default: latest) keyed by source, plus the lap label."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    if lap in (None, "latest"):
        if manifest["laps"]:
            entry = manifest["laps"][-1]
            label = f"lap{entry['lap']}"
        elif manifest["init"]:
            entry, label = manifest["init"][-1], "init"
        else:
            raise FileNotFoundError(f"{run_dir} has no checkpoints yet")
        paths = entry["checkpoints"]
    elif lap == "init":
        if not manifest["init"]:
            raise FileNotFoundError(f"{run_dir} has no initialization checkpoints")
        entry = manifest["init"][-1]
        paths = {**entry["checkpoints"], **entry["gaussian_checkpoints"]}
        label = "init"
    else:
        match = [e for e in manifest["laps"] if str(e["lap"]) == str(lap)]
        if not match:
            raise FileNotFoundError(f"{run_dir} has no lap {lap}")
        paths, label = match[0]["checkpoints"], f"lap{lap}"
    models = {}
    for b, p in paths.items():
        path = run_dir / p
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        models[int(b)] = load_checkpoint(path)[0]
    return manifest, models, label


def cmd_sample(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "manifest.json").exists():
        raise FileNotFoundError(f"{run_dir} has no manifest.json")
    manifest, models, label = _run_models(run_dir, args.lap)
    cfg = manifest["config"]
    rc = build_run_config(cfg)
    sampler = rc.em.sampler if args.pc_steps is None else replace(rc.em.sampler, pc_steps=args.pc_steps)
    out_dir = run_dir / "samples"
    meta = {"run": str(run_dir), "checkpoint": label, "seed": args.seed, "pc_steps": sampler.pc_steps}
    if args.prior is not None:
        if args.prior < 1:
            raise ConfigError("--prior: must be a positive integer")
        arrays = {}
        for b, m in sorted(models.items()):
            arrays[f"source_{b}"] = pc_sample_prior(m, sampler, stream(args.seed, _SAMPLE, 1, b), n=args.prior)
        path = Path(args.out) if args.out else out_dir / f"prior_{label}_n{args.prior}_seed{args.seed}.ddp"
        write_arrays(path, "samples", {**meta, "mode": "prior"}, arrays)
    else:
        lo, hi = _parse_range(args.posterior)
        ds = load_dataset(rc.data_dir if args.dataset is None else args.dataset)
        view_id = len(ds.views) - 1 if args.view is None else args.view
        if not 0 <= view_id < len(ds.views):
            raise ConfigError(f"--view: out of range 0..{len(ds.views) - 1}")
        view = ds.views[view_id]
        if not 0 <= lo < hi <= view.n:
            raise ConfigError(f"--posterior: range must lie within 0..{view.n}")
        sources = [b for b in view.active_sources() if b in models]
        missing = [b for b in view.active_sources() if b not in models]
        if missing:
            raise FileNotFoundError(f"no checkpoint for sources {missing} observed in view {view_id}")
        obs = view.observation(slice(lo, hi), sources)
        draws = pc_sample_posterior(obs, [models[b] for b in sources], sampler, stream(args.seed, _SAMPLE, 2, view_id, lo, hi))
        arrays = {f"source_{b}": x for b, x in zip(sources, draws)}
        path = Path(args.out) if args.out else out_dir / f"posterior_{label}_view{view_id}_{lo}-{hi}_seed{args.seed}.ddp"
        write_arrays(path, "samples", {**meta, "mode": "posterior", "view": view_id, "rows": [lo, hi]}, arrays)
    print(path)
    return 0


def _parse_range(text: str) -> tuple[int, int]:
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
        else:
            lo = int(text)
            hi = lo + 1
    except ValueError as err:
        raise ConfigError(f"--posterior: expected LO:HI or an index, got {text!r}") from err
    return lo, hi


def cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "manifest.json").exists():
        raise FileNotFoundError(f"{run_dir} has no manifest.json")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    rc = build_run_config(manifest["config"])
    sample_files = sorted((run_dir / "samples").glob("*.ddp")) if args.samples is None else [Path(p) for p in args.samples]
    rows, summary = [], {"run": str(run_dir)}

    if args.reference is not None:
        ref = read_arrays(args.reference)
        for f in sample_files:
            arrays = read_arrays(f)
            for key in sorted(set(arrays) & set(ref)):
                sd = sinkhorn_divergence(arrays[key], ref[key], rc.sinkhorn)
                rows.append({"file": f.name, "source": key.split("_")[1], "kind": "reference", "sinkhorn": sd, "psnr": ""})
    else:
        if not args.truth:
            print(
                "metrics compare samples with the true sources; rerun with --truth to allow reading them, "
                "or pass --reference FILE to compare against another sample file",
                file=sys.stderr,
            )
            return 2
        ds = load_dataset(rc.data_dir if args.dataset is None else args.dataset, allow_truth=True)
        ev = manifest["config"]["eval"]
        n_prior = ev["n_prior"] if args.n_prior is None else args.n_prior
        evaluator = TruthEvaluator(
            ds, n_prior=n_prior, sampler=replace(rc.em.sampler, pc_steps=ev["pc_steps"]), sinkhorn=rc.sinkhorn, seed=rc.em.seed, posterior=False
        )
        laps = manifest["laps"] if args.all_laps else manifest["laps"][-1:]
        for entry in laps:
            models = {int(b): load_checkpoint(run_dir / p)[0] for b, p in entry["checkpoints"].items()}
            for r in evaluator(stage=entry["stage"], lap=entry["lap"], models=models):
                rows.append({"file": "", "lap": entry["lap"], **r})
        for f in sample_files:
            header = read_header(f)
            meta = header["meta"]
            arrays = read_arrays(f, header=header)
            for key, x in sorted(arrays.items()):
                b = int(key.split("_")[1])
                if meta.get("mode") == "posterior":
                    lo, hi = meta["rows"]
                    truth = ds.truth(meta["view"], allow_truth=True)[lo:hi, b]
                    value = report_psnr(psnr(truth, x))
                    sd = sinkhorn_divergence(x, truth, rc.sinkhorn)
                    rows.append({"file": f.name, "source": b, "kind": f"posterior_view{meta['view']}", "sinkhorn": sd, "psnr": value})
                else:
                    curve = generate_manifold_sampler(ds.manifolds[b])
                    ref = curve(stream(rc.em.seed, _SAMPLE, 3, b).random(x.shape[0]))
                    rows.append({"file": f.name, "source": b, "kind": "prior", "sinkhorn": sinkhorn_divergence(x, ref, rc.sinkhorn), "psnr": ""})

    out = run_dir / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    fields_ = ["file", "lap", "source", "kind", "sinkhorn", "psnr"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields_, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    summary["rows"] = len(rows)
    summary["mean_sinkhorn"] = float(np.mean([r["sinkhorn"] for r in rows])) if rows else None
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(out / "metrics.csv")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddprism", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(q):
        q.add_argument("config", help="JSON run configuration")
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one configuration value")
        q.add_argument("--seed", type=int)
        q.add_argument("--name")
        q.add_argument("--output-root")

    q = sub.add_parser("gen-data", help="generate and write the synthetic dataset")
    config_args(q)
    q.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("train", help="run EM training")
    config_args(q)
    q.add_argument("--strategy", choices=("joint", "contrastive", "gibbs"))
    q.add_argument("--resume", action="store_true")
    q.add_argument("--dry-run", action="store_true")
    q.add_argument("--eval-truth", action="store_true", help="score every lap against the true sources")
    q.add_argument("--allow-truth", action="store_true", help="permit reading true sources")
    q.add_argument("--cg-diagnostics", action="store_true", help="write per-observation CG records as NDJSON")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("sample", help="draw prior or posterior samples from a run")
    q.add_argument("run_dir")
    mode = q.add_mutually_exclusive_group(required=True)
    mode.add_argument("--prior", type=int, metavar="N")
    mode.add_argument("--posterior", metavar="LO:HI")
    q.add_argument("--view", type=int)
    q.add_argument("--lap", help="lap number, 'latest' or 'init'")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--pc-steps", type=int)
    q.add_argument("--dataset")
    q.add_argument("--out")
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("metrics", help="Sinkhorn divergence and PSNR for a run")
    q.add_argument("run_dir")
    q.add_argument("--truth", action="store_true", help="permit reading true sources")
    q.add_argument("--reference", help="compare sample files with this sample file instead of the truth")
    q.add_argument("--samples", nargs="*")
    q.add_argument("--dataset")
    q.add_argument("--all-laps", action="store_true", help="prior metrics for every lap checkpoint")
    q.add_argument("--n-prior", type=int)
    q.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ConfigError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError, PermissionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
