"""Command-line entry point: ``panelmean {fit,simulate,diagnose,gen}``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .analysis import (
    EXIT_OK,
    EXIT_SAMPLER,
    EXIT_VALIDATION,
    PLOT_KINDS,
    RunConfig,
    diagnose,
    emit_plot_data,
    run_analysis,
)
from .model import DataError, build_time_grid
from .sampler import SamplerConfig, SamplerError
from .simulation import (
    FIXED_GRID,
    UNIFORM_TIMES,
    HRSLikeSpec,
    ScenarioSpec,
    generate_dataset,
    generate_hrs_like,
    run_replication_study,
)

log = logging.getLogger("panelmean")

DESK = dict(replications=100, iterations=20_000, burn_in=5_000, thin=10)
FULL = dict(replications=500, iterations=50_000, burn_in=10_000, thin=25)


def _beta(s: str) -> tuple:
    return tuple(float(p) for p in s.split(","))


def _add_sampler_flags(p, defaults):
    p.add_argument("--iterations", type=int, default=defaults.get("iterations"))
    p.add_argument("--burn-in", type=int, default=defaults.get("burn_in"))
    p.add_argument("--thin", type=int, default=defaults.get("thin"))
    p.add_argument("--adapt-start", type=int, default=None)
    p.add_argument("--adapt-interval", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="panelmean",
        description="Bayesian proportional mean model for panel binary recurrent-event data.",
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the model to a long-format CSV")
    f.add_argument("input", nargs="?", help="CSV with subject_id,time,indicator,covariates...")
    f.add_argument("--config", help="key = value file; command-line flags override it")
    f.add_argument("--covariates", help="comma-separated covariate columns (default: all)")
    f.add_argument("--prior", choices=("vague", "explicit"))
    f.add_argument("--prior-variance", type=float)
    f.add_argument("--beta-mean")
    f.add_argument("--beta-var")
    f.add_argument("--rho-star-mean")
    f.add_argument("--rho-star-var")
    _add_sampler_flags(f, {})
    f.add_argument("--chains", type=int)
    f.add_argument("--max-points", type=int)
    f.add_argument("-o", "--output-dir", required=False)
    f.add_argument("--plots", default="", help=f"comma-separated subset of {','.join(PLOT_KINDS)}, or 'all'")

    s = sub.add_parser("simulate", help="replication study on simulated data")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--beta", type=_beta, default=(0.9, 1.2))
    s.add_argument("--exponent", type=float, default=0.9)
    s.add_argument("--scenario", choices=(FIXED_GRID, UNIFORM_TIMES), default=FIXED_GRID)
    s.add_argument("--mixed", action="store_true", help="mixed Poisson with N(0, sd^2) frailty")
    s.add_argument("--omega-sd", type=float, default=0.2)
    s.add_argument("--replications", type=int, default=None)
    s.add_argument("--max-points", type=int, default=None,
                   help="coarsen each replicate's grid to at most this many cells")
    s.add_argument("--full", action="store_true",
                   help="full protocol: 500 replications, 50000/10000/25")
    _add_sampler_flags(s, {})
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-o", "--output-dir", required=True)

    d = sub.add_parser("diagnose", help="recompute diagnostics from saved draw matrices")
    d.add_argument("input", help="dataset CSV used for the fit")
    d.add_argument("draws", nargs="+", help="draw-matrix CSV files, one per chain")
    d.add_argument("--grid", help="grid.csv written by fit (default: rebuild from data)")
    d.add_argument("--max-points", type=int)
    d.add_argument("--covariates")
    d.add_argument("-o", "--output-dir", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--preset", choices=("scenario1", "scenario2", "hrs"), default="scenario1")
    g.add_argument("--n", type=int)
    g.add_argument("--beta", type=_beta)
    g.add_argument("--mixed", action="store_true")
    g.add_argument("--omega-sd", type=float, default=0.2)
    g.add_argument("--attendance", type=float, default=1.0)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("-o", "--output", required=True)
    return ap


def _cmd_fit(args) -> int:
    cfg = io.read_config(args.config) if args.config else {}
    overrides = {
        "input": args.input, "covariates": args.covariates, "prior": args.prior,
        "prior_variance": args.prior_variance, "beta_mean": args.beta_mean,
        "beta_var": args.beta_var, "rho_star_mean": args.rho_star_mean,
        "rho_star_var": args.rho_star_var, "iterations": args.iterations,
        "burn_in": args.burn_in, "thin": args.thin, "adapt_start": args.adapt_start,
        "adapt_interval": args.adapt_interval, "seed": args.seed, "chains": args.chains,
        "max_points": args.max_points, "output_dir": args.output_dir,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig.from_mapping(cfg)
    if not config.input:
        raise DataError("no input file given")
    if not config.output_dir:
        raise DataError("no output directory given")
    t0 = time.perf_counter()
    report = run_analysis(config)
    log.info("fit finished in %.1f s", time.perf_counter() - t0)
    kinds = PLOT_KINDS if args.plots == "all" else [k for k in args.plots.split(",") if k]
    for kind in kinds:
        emit_plot_data(report, kind, Path(config.output_dir) / "plots")
    sys.stdout.write(report.summary_text())
    return report.exit_code


def _cmd_simulate(args) -> int:
    proto = dict(FULL if args.full else DESK)
    for key in ("replications", "iterations", "burn_in", "thin"):
        if getattr(args, key) is not None:
            proto[key] = getattr(args, key)
    seed = 2024 if args.seed is None else args.seed
    spec = ScenarioSpec(
        n=args.n, beta_true=args.beta, baseline_exponent=args.exponent,
        scenario=args.scenario, mixed=args.mixed, omega_sd=args.omega_sd,
        replications=proto["replications"], seed=seed,
        max_points=args.max_points,
    )
    extra = {k: v for k, v in (("adapt_start", args.adapt_start),
                               ("adapt_interval", args.adapt_interval)) if v is not None}
    sc = SamplerConfig(n_iterations=proto["iterations"], burn_in=proto["burn_in"],
                       thin=proto["thin"], seed=seed, **extra)
    t0 = time.perf_counter()
    summary = run_replication_study(spec, sc, workers=args.workers)
    log.info("study finished in %.1f s", time.perf_counter() - t0)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(summary.table_rows())
    io.write_table(out / "table.csv", list(rows[0]), (r.values() for r in rows))
    io.write_table(out / "baseline_mse.csv", ["mean_mse_baseline", "replicates_ok",
                                              "replicates_failed"],
                   [[summary.mean_mse_baseline, summary.n_ok, summary.n_failed]])
    io.write_table(
        out / "replicates.csv",
        ["replicate", "beta_1", "beta_2", "sd_1", "sd_2", "low_1", "high_1", "low_2",
         "high_2", "acceptance_rate"],
        ([r.index, *r.estimate, *r.sd, r.ci_low[0], r.ci_high[0], r.ci_low[1],
          r.ci_high[1], r.acceptance_rate] for r in summary.replicates),
    )
    meta = {**asdict(spec), **{k: v for k, v in asdict(sc).items() if k != "init"}}
    (out / "metadata.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in meta.items()))
    for r in rows:
        sys.stdout.write(
            f"{r['parameter']}  true {r['true']:.3f}  mean {r['mean']:.4f}  "
            f"|bias| {r['abs_bias']:.4f}  ESD {r['esd']:.4f}  SSE {r['sse']:.4f}  "
            f"CP {r['cp']:.2f}\n")
    sys.stdout.write(f"mean MSE of baseline {summary.mean_mse_baseline:.4f}\n")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    covs = args.covariates.split(",") if args.covariates else None
    data = io.read_dataset(args.input, covs)
    grid = io.read_grid(args.grid) if args.grid else build_time_grid(data, args.max_points)
    chains = [io.read_draws(p) for p in args.draws]
    report = diagnose(data, grid, chains, args.output_dir)
    sys.stdout.write(report.summary_text())
    return report.exit_code


def _cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.preset == "hrs":
        kw = {"seed": args.seed, "attendance": args.attendance}
        if args.n:
            kw["n"] = args.n
        if args.beta:
            kw["beta_true"] = args.beta
        data = generate_hrs_like(HRSLikeSpec(**kw), rng)
    else:
        spec = ScenarioSpec(
            n=args.n or 100, beta_true=args.beta or (0.9, 1.2),
            scenario=FIXED_GRID if args.preset == "scenario1" else UNIFORM_TIMES,
            mixed=args.mixed, omega_sd=args.omega_sd, seed=args.seed,
        )
        data = generate_dataset(spec, rng)
    io.write_dataset(data, args.output)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"fit": _cmd_fit, "simulate": _cmd_simulate, "diagnose": _cmd_diagnose,
               "gen": _cmd_gen}[args.command]
    try:
        return handler(args)
    except (SamplerError, RuntimeError) as exc:
        log.error("sampler failure: %s", exc)
        return EXIT_SAMPLER
    except (DataError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
