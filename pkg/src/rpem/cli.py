"""Command-line entry point: simulate, fit, and report workflows.

Exit codes: 0 success (fit converged), 1 fit did not converge (results still
written), 2 configuration or data error, 3 simulation error, 4 fatal
degeneracy during fitting. Progress and diagnostics go to stderr; report
tables go to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .core import (
    ComponentStarvationError,
    ConfigError,
    DatasetFormatError,
    FatalDegeneracyError,
    RpemError,
    SimulationError,
)
from .driver import fit
from .sim import simulate

log = logging.getLogger("rpem")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_DEGENERACY = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset from [truth]/[sim]")
    sim.add_argument("--config", required=True, type=Path)
    sim.add_argument("--out", required=True, type=Path)
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--quiet", action="store_true")

    fitp = sub.add_parser("fit", help="fit a dataset from [init]")
    fitp.add_argument("--config", required=True, type=Path)
    fitp.add_argument("--data", required=True, type=Path)
    fitp.add_argument("--out", required=True, type=Path)
    fitp.add_argument("--truth", type=Path, default=None, help="true population parameters (params.csv format)")
    fitp.add_argument("--seed", type=int, default=None)
    fitp.add_argument("--workers", type=int, default=1)
    fitp.add_argument("--quiet", action="store_true")

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("--results", required=True, type=Path)
    rep.add_argument("--truth", type=Path, default=None)
    rep.add_argument("--quiet", action="store_true")
    return parser


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = dataio.load_config(args.config)
    spec = dataio.build_sim_spec(cfg, seed=args.seed)
    try:
        result = simulate(spec)
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    args.out.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(result.subjects, args.out / "dataset.csv")
    dataio.write_thetas(
        [s.id for s in result.subjects], result.truth_thetas, cfg.names, args.out / "truth.csv"
    )
    dataio.write_params(spec.truth, cfg.names, args.out / "params_true.csv")
    n_obs = sum(s.m for s in result.subjects)
    print(f"wrote {len(result.subjects)} subjects, {n_obs} observations to {args.out}")
    if int(result.redraw_counts.sum()):
        log.info("redrew %d invalid parameter draws", int(result.redraw_counts.sum()))
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = dataio.load_config(args.config)
    fit_config = dataio.build_fit_config(cfg, seed=args.seed, workers=args.workers)
    data = dataio.parse_dataset(args.data)
    truth = None
    if args.truth is not None:
        truth, _ = dataio.parse_params(args.truth)
    try:
        result = fit(data, fit_config)
    except FatalDegeneracyError as exc:
        print(f"fatal degeneracy at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DEGENERACY
    except ComponentStarvationError as exc:
        print(f"component starvation at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DEGENERACY
    dataio.write_result(result, args.out, cfg.names, truth)
    print(dataio.format_summary(result, cfg.names, truth), end="")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_report(args: argparse.Namespace) -> int:
    params_path = args.results / "params.csv"
    if not params_path.exists():
        print(f"missing {params_path}", file=sys.stderr)
        return EXIT_CONFIG
    params, names = dataio.parse_params(params_path)
    print(params_path.read_text(), end="")
    trace_path = args.results / "trace.csv"
    if trace_path.exists():
        trace, accept = dataio.parse_trace(trace_path)
        print(f"iterations: {len(trace)}")
        print(f"final loglik: {trace[-1]:.10g}")
        print(f"mean acceptance rate: {float(np.mean(accept)):.6f}")
    if args.truth is not None:
        truth, _ = dataio.parse_params(args.truth)
        pe = dataio.percentage_errors(params, truth)
        print("percentage errors vs truth:")
        for k in range(params.K):
            for j, name in enumerate(names):
                print(f"  mu[{name}] c{k + 1}: {100 * pe['mu'][k, j]:.2f}%")
            for j, name in enumerate(names):
                print(f"  sigma[{name}] c{k + 1}: {100 * pe['sigma'][k, j]:.2f}%")
        if "sigma_resid" in pe:
            print(f"  sigma_resid: {100 * pe['sigma_resid']:.2f}%")
        print(f"  mean mu error: {100 * pe['mean_mu']:.2f}%")
        print(f"  mean sigma error: {100 * pe['mean_sigma']:.2f}%")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        force=True,
    )
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "fit":
            return cmd_fit(args)
        return cmd_report(args)
    except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except RpemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
