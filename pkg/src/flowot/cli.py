"""Command-line front end.

Subcommands:
  ot         train one OT-map experiment from a config file
  barycenter train one barycenter experiment from a config file
  benchmark  run a suite of experiments over a list of dimensions
  oracle     closed-form spot checks (gaussian-ot, bures, fixed-point, quantile-1d)
  dry-run    validate a config and print the derived schedule/architecture

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import append_result_row, run_experiment
from .config import ExperimentConfig, default_couplings, default_levels, parse_config
from .errors import ConfigError, ContractViolation, TrainingDiverged
from .oracle import GaussianDist, bures_w2, gaussian_ot_map, ls_barycenter_fixed_point, quantile_ot_1d
from .train import WeightSchedule, schedule_value


def _vector(raw: str) -> np.ndarray:
    return np.asarray([float(v) for v in raw.split(",")], dtype=np.float64)


def _matrix(raw: str) -> np.ndarray:
    flat = _vector(raw)
    d = int(round(np.sqrt(flat.size)))
    if d * d != flat.size:
        raise ContractViolation(f"matrix needs a square number of entries, got {flat.size}")
    return flat.reshape(d, d)


def _gaussian(mean_raw: str, cov_raw: str) -> GaussianDist:
    return GaussianDist(_vector(mean_raw), _matrix(cov_raw))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for task in ("ot", "barycenter"):
        p = sub.add_parser(task, help=f"run one {task} experiment")
        p.add_argument("--config", required=True, help="path to an INI config file")
        p.add_argument("--outdir", default=None, help="override the config output directory")

    p = sub.add_parser("benchmark", help="run a suite over a dimension list")
    p.add_argument("--suite", required=True, choices=["gaussian-ls", "uniform-ls", "rotated-gaussian"])
    p.add_argument("--dims", required=True, help="comma-separated dimensions, e.g. 2,4,8")
    p.add_argument("--task", default="ot", choices=["ot", "barycenter"])
    p.add_argument("--n-inputs", type=int, default=None, help="inputs per barycenter run (default 4)")
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-samples", type=int, default=100_000)
    p.add_argument("--outdir", default="runs")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs (processes)")

    p = sub.add_parser("dry-run", help="validate a config without training")
    p.add_argument("--config", required=True)

    p = sub.add_parser("oracle", help="closed-form spot checks")
    osub = p.add_subparsers(dest="oracle_command", required=True)

    g = osub.add_parser("gaussian-ot", help="optimal map and squared cost between Gaussians")
    for flag in ("--m1", "--c1", "--m2", "--c2"):
        g.add_argument(flag, required=True)

    g = osub.add_parser("bures", help="squared Bures-Wasserstein distance")
    for flag in ("--m1", "--c1", "--m2", "--c2"):
        g.add_argument(flag, required=True)

    g = osub.add_parser("fixed-point", help="location-scatter barycenter covariance")
    g.add_argument("--covs", required=True, help="';'-separated row-major covariance matrices")
    g.add_argument("--weights", required=True)

    g = osub.add_parser("quantile-1d", help="1-D transport cost from sample quantiles")
    g.add_argument("--a", required=True, help="comma-separated samples or @file (one per line)")
    g.add_argument("--b", required=True)
    g.add_argument("--p", type=float, default=2.0)
    return parser


def _read_samples(raw: str) -> np.ndarray:
    if raw.startswith("@"):
        return np.loadtxt(raw[1:]).reshape(-1)
    return _vector(raw)


def _cmd_oracle(args) -> int:
    if args.oracle_command == "gaussian-ot":
        amap, w2 = gaussian_ot_map(_gaussian(args.m1, args.c1), _gaussian(args.m2, args.c2))
        print("A =", " ".join(repr(v) for v in amap.matrix.ravel()))
        print("u =", " ".join(repr(v) for v in amap.shift))
        print(repr(w2))
    elif args.oracle_command == "bures":
        print(repr(bures_w2(_gaussian(args.m1, args.c1), _gaussian(args.m2, args.c2))))
    elif args.oracle_command == "fixed-point":
        covs = [_matrix(part) for part in args.covs.split(";")]
        weights = _vector(args.weights)
        cov, iters = ls_barycenter_fixed_point(covs, weights)
        print("iterations =", iters)
        print("cov =", " ".join(repr(v) for v in cov.ravel()))
    else:
        print(repr(quantile_ot_1d(_read_samples(args.a), _read_samples(args.b), p=args.p)))
    return 0


def _print_dry_run(config: ExperimentConfig) -> None:
    sched = WeightSchedule(config.schedule_start, config.schedule_end, config.iterations)
    probe = [1, max(2, config.iterations // 2), config.iterations]
    print(config.to_text())
    print("# derived schedule:")
    for t in probe:
        print(f"#   zeta_{t} = {schedule_value(sched, t)!r}")
    active = config.d
    dims = []
    for lvl in range(config.levels):
        dims.append(active)
        if lvl < config.levels - 1:
            active -= active // 2
    print(f"# architecture: levels={config.levels} couplings/level={config.couplings} "
          f"active dims per level={dims} hidden={list(config.hidden)}")
    print(f"# run id: {config.run_id()}")


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config)
    if getattr(args, "outdir", None):
        config = replace(config, outdir=args.outdir)
    return config


def _benchmark_config(args, task: str, d: int) -> ExperimentConfig:
    family = "rotated-gaussian" if args.suite == "rotated-gaussian" else "location-scatter"
    base = {"gaussian-ls": "gaussian", "uniform-ls": "uniform-cube"}.get(args.suite, "gaussian")
    if task == "ot":
        n_inputs = 2
        weights = (0.5, 0.5)
    else:
        n_inputs = args.n_inputs or 4
        weights = tuple(1.0 / n_inputs for _ in range(n_inputs))
        if family == "location-scatter" and n_inputs == 4:
            weights = (0.4, 0.3, 0.2, 0.1)
    if task == "ot" and family == "rotated-gaussian":
        raise ConfigError("the rotated-gaussian suite supports the barycenter task only")
    return ExperimentConfig(
        task=task,
        outdir=args.outdir,
        family=family,
        base=base,
        d=d,
        n_inputs=n_inputs,
        weights=weights,
        noise=0.05,
        levels=default_levels(d),
        couplings=default_couplings(d),
        hidden=(64, 64),
        clamp=5.0,
        encoding="scalar" if family == "rotated-gaussian" else "one-hot",
        residual=True,
        iterations=args.iters,
        batch_size=args.batch,
        latent_batch=None,
        learning_rate=args.lr,
        schedule_start=0.0,
        schedule_end=-2.0,
        seed=args.seed,
        eval_samples=args.eval_samples,
    )


def _run_isolated(config: ExperimentConfig):
    """Worker entry for pooled benchmark runs; never raises through pickle."""
    try:
        return run_experiment(config, append_results=False), None
    except TrainingDiverged as exc:
        return getattr(exc, "partial_result", None), str(exc)


def _cmd_benchmark(args) -> int:
    dims = [int(v) for v in args.dims.split(",")]
    configs = [_benchmark_config(args, args.task, d) for d in dims]
    results = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_isolated, configs))
    else:
        results = [_run_isolated(cfg) for cfg in configs]
    failures = 0
    results_csv = Path(args.outdir) / "results.csv"
    for (result, error), cfg in zip(results, configs):
        if result is not None:
            append_result_row(results_csv, result)
            print(f"{result.run_id}: status={result.status} "
                  f"l2_uvp={result.l2_uvp} bw2_uvp={result.bw2_uvp}")
        if error is not None:
            failures += 1
            print(f"{cfg.run_id()}: FAILED ({error})", file=sys.stderr)
    return 2 if failures else 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage/--version output
        return 0 if exc.code in (0, None) else 1

    try:
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "dry-run":
            _print_dry_run(parse_config(args.config))
            return 0
        if args.command in ("ot", "barycenter"):
            config = _load_config(args)
            if config.task != args.command:
                raise ConfigError(
                    f"config declares task '{config.task}' but the '{args.command}' command was invoked"
                )
            result = run_experiment(config)
            print(f"{result.run_id}: status={result.status} l2_uvp={result.l2_uvp} "
                  f"bw2_uvp={result.bw2_uvp} w2_hat={result.w2_hat} "
                  f"wall_time_s={result.wall_time_s:.1f}")
            return 0
        if args.command == "benchmark":
            return _cmd_benchmark(args)
        raise AssertionError("unreachable")
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
