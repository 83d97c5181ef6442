"""
blockclr: penalized conditional logistic regression for matched case-control data
================================================================================
Command-line entry point.

    python blockclr.py fit         --data pairs.csv --blocks 50,50 --lambda 5,10
    python blockclr.py stabsel     --data pairs.csv --blocks 50,50 --lambda-grid "5,1;5,2;5,5"
    python blockclr.py adapt-pf    --data pairs.csv --blocks 50,50 --type-step1 combined
    python blockclr.py find-lambda --data pairs.csv --blocks 50,50 --pf 1,3.6
    python blockclr.py simulate    --setting 3 --replicates 2 --seed 7
    python blockclr.py validate    --data pairs.csv --blocks 50,50

Every command also accepts ``--config run.env`` (flat key=value file whose keys
are the flag names with underscores); flags on the command line win.
Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numerical failure.
"""

import argparse
import logging
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from clr_console import configure_logging, console
from clr_data import validate
from clr_errors import ClrError, InvalidArgumentError, NumericalError, UsageError
from clr_io import (
    ArtifactStage,
    RunManifest,
    config_file_arguments,
    parse_block_sizes,
    parse_dataset,
    parse_lambda_grid,
    parse_vector,
    write_dataset,
)
from clr_report import ResultConsole, plot_sweep
from clr_simulation import (
    DEFAULT_THRESHOLDS,
    TABLE1_SETTINGS,
    PipelineConfig,
    generate_dataset,
    run_study,
)
from clr_solver import PenaltySpec, SolverOptions, fit_penalized, kkt_check
from clr_stability import StabilityConfig, stability_table, stable_clr_g
from clr_tuning import (
    PenaltyFactors,
    average_default_pf,
    default_lambda_grid,
    find_default_lambda,
    make_cv_plan,
    penalty_summary,
)

__version__ = "0.1.0"

logger = logging.getLogger("blockclr")

BOOLEAN_FLAGS = ("standardize", "accelerate", "reuse_subsamples", "plot", "write_data")


# ============================================================================
# 1. Argument parsing
# ============================================================================

def _add_common(parser: argparse.ArgumentParser, data_required: bool = True):
    parser.add_argument("--config", help="flat key=value file with default flag values")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    if data_required:
        parser.add_argument("--data", required=True, help="dataset CSV (stratum, case, covariates)")
        parser.add_argument("--blocks", default=None,
                            help="block sizes, e.g. 50,50 (default: <data>.blocks sidecar or one block)")
    parser.add_argument("--out", default=None, help="output directory")


def _add_solver(parser: argparse.ArgumentParser):
    parser.add_argument("--alpha", type=float, default=1.0, help="elastic-net mixing in (0, 1]")
    parser.add_argument("--max-iterations", type=int, default=1000)
    parser.add_argument("--tolerance", type=float, default=1e-8,
                        help="relative objective change for convergence")
    parser.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=True)
    parser.add_argument("--accelerate", action=argparse.BooleanOptionalAction, default=True)


def _add_parallel(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1, help="parallel workers (-1: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockclr",
        description="Penalized conditional logistic regression with block penalties "
                    "and stability selection.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one block-penalized model")
    _add_common(fit)
    _add_solver(fit)
    _add_parallel(fit)
    fit.add_argument("--lambda", dest="lambdas", required=True, help="per-block penalties, e.g. 5,10")
    fit.add_argument("--unpenalized", default=None, help="comma-separated 0-based column indices")

    stab = sub.add_parser("stabsel", help="complementary-pairs stability selection")
    _add_common(stab)
    _add_solver(stab)
    _add_parallel(stab)
    stab.add_argument("--lambda-grid", required=True,
                      help='penalty vectors "5,1;5,2" or a CSV file with one vector per row')
    stab.add_argument("--B", type=int, default=100, help="complementary pairs per penalty vector")
    stab.add_argument("--threshold", type=float, default=0.55)
    stab.add_argument("--reuse-subsamples", action=argparse.BooleanOptionalAction, default=True,
                      help="share one subsample schedule across penalty vectors")

    adapt = sub.add_parser("adapt-pf", help="data-adaptive penalty factors")
    _add_common(adapt)
    _add_solver(adapt)
    _add_parallel(adapt)
    adapt.add_argument("--type-step1", choices=("separate", "combined"), default="combined")
    adapt.add_argument("--folds", type=int, default=5)
    adapt.add_argument("--pf-cap", type=float, default=100.0)
    adapt.add_argument("--repeats", type=int, default=1, help="average over this many CV seeds")

    find = sub.add_parser("find-lambda", help="overall penalty level by CV deviance")
    _add_common(find)
    _add_solver(find)
    _add_parallel(find)
    find.add_argument("--pf", default=None, help="penalty factors, e.g. 1,3.6 (default all 1)")
    find.add_argument("--grid", default=None, help="lambda1 grid (default: 20 points below lambda_max)")
    find.add_argument("--folds", type=int, default=5)
    find.add_argument("--se-fraction", type=float, default=0.0,
                      help="pick the largest lambda1 within this many standard errors of the minimum")

    sim = sub.add_parser("simulate", help="simulation study over the built-in settings")
    _add_common(sim, data_required=False)
    _add_solver(sim)
    _add_parallel(sim)
    sim.add_argument("--setting", default="1,2,3,4,5,6", help="setting numbers, e.g. 3 or 1,4,6")
    sim.add_argument("--replicates", type=int, default=20)
    sim.add_argument("--thresholds", default=",".join(f"{t:.2f}" for t in DEFAULT_THRESHOLDS))
    sim.add_argument("--threshold", type=float, default=0.55, help="threshold for the summary table")
    sim.add_argument("--B", type=int, default=50)
    sim.add_argument("--folds", type=int, default=5)
    sim.add_argument("--type-step1", choices=("separate", "combined"), default="combined")
    sim.add_argument("--pf-cap", type=float, default=100.0)
    sim.add_argument("--pf-repeats", type=int, default=3, help="CV seeds averaged for the penalty factors")
    sim.add_argument("--se-fraction", type=float, default=1.0,
                     help="standard errors above the minimum CV deviance allowed for lambda1")
    sim.add_argument("--n-pairs", type=int, default=None, help="override matched sets per dataset")
    sim.add_argument("--controls-per-case", type=int, default=None)
    sim.add_argument("--rho", type=float, default=None, help="exchangeable covariate correlation")
    sim.add_argument("--plot", action=argparse.BooleanOptionalAction, default=False)
    sim.add_argument("--write-data", action=argparse.BooleanOptionalAction, default=False)

    val = sub.add_parser("validate", help="check a dataset file")
    _add_common(val)
    val.add_argument("--alpha", type=float, default=1.0, help="elastic-net mixing in (0, 1]")
    return parser


def parse_args(argv: List[str]) -> argparse.Namespace:
    """Parse flags, splicing in ``--config`` file values before the command line."""
    argv = list(argv)
    # Required flags may live in the config file, so find it before the full parse.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and argv and not argv[0].startswith("-"):
        tokens = config_file_arguments(known.config, BOOLEAN_FLAGS)
        argv = argv[:1] + tokens + argv[1:]
    return build_parser().parse_args(argv)


def validate_args(args: argparse.Namespace) -> None:
    """Range checks on every parameter, before any computation starts."""
    problems = []

    def need(condition: bool, message: str):
        if not condition:
            problems.append(message)

    if hasattr(args, "alpha"):
        need(0.0 < args.alpha <= 1.0, f"--alpha must lie in (0, 1], got {args.alpha}")
    if hasattr(args, "max_iterations"):
        need(args.max_iterations >= 1, "--max-iterations must be >= 1")
        need(args.tolerance > 0, "--tolerance must be positive")
    if hasattr(args, "workers"):
        need(args.workers >= 1 or args.workers == -1, "--workers must be >= 1 or -1")
    if hasattr(args, "B"):
        need(args.B >= 1, "--B must be >= 1")
    if hasattr(args, "threshold"):
        need(0.0 < args.threshold < 1.0, "--threshold must lie in (0, 1)")
    if hasattr(args, "folds"):
        need(args.folds >= 2, "--folds must be >= 2")
    if hasattr(args, "pf_cap"):
        need(args.pf_cap >= 1.0, "--pf-cap must be >= 1")
    if getattr(args, "repeats", 1) < 1:
        problems.append("--repeats must be >= 1")
    if hasattr(args, "se_fraction"):
        need(args.se_fraction >= 0, "--se-fraction must be >= 0")
    if hasattr(args, "pf_repeats"):
        need(args.pf_repeats >= 1, "--pf-repeats must be >= 1")
    if args.command == "simulate":
        need(args.replicates >= 1, "--replicates must be >= 1")
        try:
            thresholds = parse_vector(args.thresholds)
            need(bool(np.all((thresholds > 0) & (thresholds < 1))), "--thresholds must lie in (0, 1)")
        except InvalidArgumentError as exc:
            problems.append(f"--thresholds: {exc}")
        labels = [s.strip() for s in args.setting.split(",") if s.strip()]
        known = [str(k) for k in TABLE1_SETTINGS]
        need(bool(labels) and all(s in known for s in labels),
             f"--setting must name settings {', '.join(known)}, got {args.setting!r}")
        for name in ("n_pairs", "controls_per_case"):
            value = getattr(args, name)
            need(value is None or value >= (4 if name == "n_pairs" else 1),
                 f"--{name.replace('_', '-')} is out of range: {value}")
        need(args.rho is None or 0.0 <= args.rho < 1.0, "--rho must lie in [0, 1)")
    if problems:
        raise UsageError("; ".join(problems))


def solver_options(args: argparse.Namespace) -> SolverOptions:
    return SolverOptions(max_iterations=args.max_iterations, rel_tolerance=args.tolerance,
                         standardize=args.standardize, accelerate=args.accelerate)


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return Path("results") / f"{args.command}_{datetime.now().strftime('%Y%m%d_%H%M%S')}"


def _load(args: argparse.Namespace):
    blocks = parse_block_sizes(args.blocks) if args.blocks else None
    return parse_dataset(args.data, blocks)


def _parameters(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in vars(args).items() if k not in ("config", "log_level")}


# ============================================================================
# 2. Commands
# ============================================================================

def cmd_fit(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    data = _load(args)
    manifest.add_input(args.data)
    mask = None
    if args.unpenalized:
        mask = np.zeros(data.p, dtype=bool)
        idx = parse_vector(args.unpenalized).astype(int)
        if np.any((idx < 0) | (idx >= data.p)):
            raise InvalidArgumentError(f"--unpenalized indices must lie in [0, {data.p})")
        mask[idx] = True
    spec = PenaltySpec(parse_vector(args.lambdas), args.alpha, mask)

    start = time.perf_counter()
    fit = fit_penalized(data, spec, solver_options(args))
    manifest.timings["fit_seconds"] = round(time.perf_counter() - start, 6)
    kkt = kkt_check(fit, data, spec)

    stage.write_csv("coefficients.csv", pd.DataFrame({
        "variable": list(data.column_names),
        "block": data.block_of_column + 1,
        "beta": fit.beta,
    }))
    manifest.results.update({
        "objective": fit.objective,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "nonzero": fit.nonzero.tolist(),
        "message": fit.message,
        "kkt_violations": len(kkt.violations),
        "penalty": spec.to_dict(),
        "standardization": fit.standardization.to_dict(),
    })
    manifest.warnings.extend(fit.warnings)
    view.show_fit(fit, data)
    if not fit.converged:
        raise NumericalError(
            f"fit did not converge after {fit.iterations} iteration(s): {fit.message}"
        )
    return 0


def cmd_stabsel(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    data = _load(args)
    manifest.add_input(args.data)
    config = StabilityConfig(parse_lambda_grid(args.lambda_grid), args.alpha, args.B, args.seed,
                             args.workers, args.reuse_subsamples, solver_options(args))
    start = time.perf_counter()
    result = stable_clr_g(data, config)
    manifest.timings["stability_seconds"] = round(time.perf_counter() - start, 6)

    frame = stability_table(result, data, args.threshold)
    stage.write_csv("stability.csv", frame)
    manifest.results.update({
        "n_fits": result.n_fits,
        "failures_per_vector": result.failures.tolist(),
        "selected": frame.loc[frame["selected"] == 1, "variable"].tolist(),
        "config": config.to_dict(),
    })
    manifest.warnings.extend(result.warnings)
    view.show_stability(result, data, args.threshold)
    return 0


def cmd_adapt_pf(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    data = _load(args)
    manifest.add_input(args.data)
    seeds = [args.seed + i for i in range(args.repeats)]
    report = average_default_pf(data, args.alpha, args.type_step1, args.folds, seeds,
                                args.pf_cap, solver_options(args), args.workers)
    stage.write_csv("penalty_factors.csv", report.to_frame())
    manifest.results.update({**penalty_summary(report), "cv_seeds": seeds})
    manifest.warnings.extend(report.warnings)
    view.show_penalty_factors(report)
    return 0


def cmd_find_lambda(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    data = _load(args)
    manifest.add_input(args.data)
    pf = PenaltyFactors(parse_vector(args.pf)) if args.pf else PenaltyFactors.ones(data.n_blocks)
    options = solver_options(args)
    grid = (parse_vector(args.grid) if args.grid
            else default_lambda_grid(data, pf, args.alpha, standardize=options.standardize))
    plan = make_cv_plan(data, args.folds, args.seed)
    search = find_default_lambda(data, pf, args.alpha, grid, plan, options, args.workers,
                                 se_fraction=args.se_fraction)
    stage.write_csv("deviance.csv", search.table)
    manifest.results.update({"lambda1": search.lambda1, "lambda_min": search.lambda_min,
                             "penalty_factors": pf.pf.tolist(),
                             "lambdas": (search.lambda1 * pf.pf).tolist()})
    manifest.warnings.extend(search.warnings)
    view.show_lambda_search(search)
    return 0


def cmd_simulate(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    overrides = {k: v for k, v in (("n_pairs", args.n_pairs),
                                   ("controls_per_case", args.controls_per_case),
                                   ("rho", args.rho)) if v is not None}
    settings = {
        s.strip(): replace(TABLE1_SETTINGS[int(s)], **overrides)
        for s in args.setting.split(",") if s.strip()
    }
    pipeline = PipelineConfig(alpha=args.alpha, B=args.B, n_folds=args.folds,
                              type_step1=args.type_step1, pf_cap=args.pf_cap,
                              pf_repeats=args.pf_repeats, se_fraction=args.se_fraction,
                              selection_threshold=args.threshold, options=solver_options(args))
    thresholds = parse_vector(args.thresholds).tolist()

    start = time.perf_counter()
    report = run_study(settings, args.replicates, thresholds, pipeline, args.seed, args.workers)
    manifest.timings["study_seconds"] = round(time.perf_counter() - start, 6)

    stage.write_csv("table1.csv", report.table1)
    stage.write_csv("sweep.csv", report.sweep)
    stage.write_csv("replicates.csv", report.records)
    if args.plot:
        plot_sweep(report.sweep, stage.path("sweep.png"))
    if args.write_data:
        for label, setting in settings.items():
            for r in range(args.replicates):
                simulated = generate_dataset(replace(setting, seed=args.seed + r))
                write_dataset(simulated.data, stage.path(f"setting{label}_rep{r:03d}.csv"))
                stage.path(f"setting{label}_rep{r:03d}.csv.blocks")
    manifest.results.update({
        "settings": {k: asdict(v) for k, v in settings.items()},
        "n_fits": report.n_fits,
        "failed_replicates": report.failures,
        "table1": report.table1.to_dict(orient="records"),
    })
    manifest.warnings.extend(f"{f['setting']}/{f['replicate']}: {f['error']}" for f in report.failures)
    view.show_study(report.table1, report.sweep)
    return 0


def cmd_validate(args, manifest: RunManifest, stage: ArtifactStage, view: ResultConsole):
    # parse_dataset raises on the first problem category; validate() adds the full list.
    data = _load(args)
    report = validate(data)
    view.console.print(f"✅ {args.data}: {data.n} strata, {data.p} covariates in "
                       f"{data.n_blocks} block(s) {data.block_sizes}")
    return 0 if report.is_valid else 3


COMMANDS: Dict[str, Callable] = {
    "fit": cmd_fit,
    "stabsel": cmd_stabsel,
    "adapt-pf": cmd_adapt_pf,
    "find-lambda": cmd_find_lambda,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def dispatch(command: str, args: argparse.Namespace, view: Optional[ResultConsole] = None) -> int:
    """Run one command; artifacts are promoted to ``--out`` only when it succeeds."""
    view = view or ResultConsole()
    try:
        validate_args(args)
        if command == "validate":
            return cmd_validate(args, None, None, view)
        out_dir = _out_dir(args)
        manifest = RunManifest(command, __version__, _parameters(args))
        with ArtifactStage(out_dir) as stage:
            status = COMMANDS[command](args, manifest, stage, view)
            manifest.results["exit_status"] = status
            stage.write_json("manifest.json", manifest.to_dict())
        console.print(f"📊 Results saved to: [cyan]{out_dir}[/cyan]")
        return status
    except ClrError as exc:
        console.print(f"[red]❌ {exc.category} error:[/red] {exc}")
        return exc.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except ClrError as exc:
        console.print(f"[red]❌ {exc.category} error:[/red] {exc}")
        return exc.exit_code
    configure_logging(args.log_level)
    try:
        return dispatch(args.command, args)
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
