"""Command-line entry point, CSV ingestion, and result serialization.

Subcommands run batch estimations and write plot-ready CSV files; no
rendering is done here. A flat key=value config file can seed any flag,
with explicit flags taking precedence. Exit codes: 0 success, 1 usage
error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import spec_from_data
from .errors import NumericalError
from .estimator import fit_fpw_series, fit_linear
from .inference import uniform_band
from .sample import Sample
from .selection import MdConfig, estimate_selection_probability
from .simulate import (
    DgpConfig,
    rate_experiment,
    run_linear_study,
    run_nonlinear_study,
    write_curves_csv,
    write_linear_csv,
)

__all__ = ["ColumnMap", "load_csv", "write_sample_csv", "run_command", "main"]

log = logging.getLogger(__name__)

DEFAULT_MISSING = frozenset({"", "NA", "."})


@dataclass(frozen=True)
class ColumnMap:
    """Names the CSV columns making up a sample.

    A covariate cell matching one of ``missing_markers`` (after
    stripping) marks the row as unselected. Outcome, instrument, and
    control cells must always be present.
    """

    outcome: str
    covariate: str
    instrument: str
    controls: tuple[str, ...] = ()
    missing_markers: frozenset[str] = DEFAULT_MISSING

    def __post_init__(self):
        names = [self.outcome, self.covariate, self.instrument, *self.controls]
        if len(set(names)) != len(names):
            raise ValueError("column names must be distinct")


def _parse_cell(raw: str, column: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(
            f"line {line}: cannot parse {column}={raw!r} as a number"
        ) from None


def load_csv(path, cmap: ColumnMap) -> Sample:
    """Read a sample from a CSV file with a header row.

    Rows with a missing or unparseable outcome, instrument, or control
    cell are collected and reported (by file line number) in one error.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [cmap.outcome, cmap.covariate, cmap.instrument, *cmap.controls]
        missing_cols = [c for c in required if c not in header]
        if missing_cols:
            raise ValueError(f"missing required columns: {', '.join(missing_cols)}")

        delta, y, x, w = [], [], [], []
        controls: list[list[float]] = []
        bad_rows: list[str] = []
        for line, row in enumerate(reader, start=2):
            try:
                for col in (cmap.outcome, cmap.instrument, *cmap.controls):
                    cell = (row[col] or "").strip()
                    if cell in cmap.missing_markers:
                        raise ValueError(f"line {line}: missing {col} cell")
                y.append(_parse_cell(row[cmap.outcome].strip(), cmap.outcome, line))
                w.append(
                    _parse_cell(row[cmap.instrument].strip(), cmap.instrument, line)
                )
                controls.append(
                    [_parse_cell(row[c].strip(), c, line) for c in cmap.controls]
                )
                cov = (row[cmap.covariate] or "").strip()
                if cov in cmap.missing_markers:
                    delta.append(0)
                    x.append(np.nan)
                else:
                    delta.append(1)
                    x.append(_parse_cell(cov, cmap.covariate, line))
            except ValueError as exc:
                bad_rows.append(str(exc))
        if bad_rows:
            raise ValueError("; ".join(bad_rows))
    if not delta:
        raise ValueError("no data rows")
    sample = Sample(
        delta=np.array(delta),
        y=np.array(y),
        x=np.array(x),
        w=np.array(w),
        controls=np.array(controls) if cmap.controls else None,
    )
    log.info(
        "loaded %d rows from %s (%d selected, %d missing)",
        sample.n,
        path,
        sample.n_selected,
        sample.n - sample.n_selected,
    )
    return sample


def write_sample_csv(sample: Sample, path, cmap: ColumnMap, missing: str = "NA"):
    """Write a sample back to CSV (inverse of :func:`load_csv`)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([cmap.outcome, cmap.covariate, cmap.instrument, *cmap.controls])
        for i in range(sample.n):
            cov = repr(sample.x[i]) if sample.delta[i] == 1 else missing
            row = [repr(sample.y[i]), cov, repr(sample.w[i])]
            if sample.controls is not None:
                row.extend(repr(v) for v in sample.controls[i])
            writer.writerow(row)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fpwreg", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def add_common(p, seed_required):
        p.add_argument("--config", help="key=value file seeding any flag")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, required=seed_required)

    def add_dgp(p):
        p.add_argument("--n", type=int, default=1000)
        p.add_argument("--rho", type=float, default=0.2)
        p.add_argument("--sigma-u2", type=float, default=1.0)
        p.add_argument("--selection-scale", type=float, default=2.0)
        p.add_argument("--reps", type=int, default=200)

    p = sub.add_parser("simulate-nonlinear", help="regression-curve study")
    add_common(p, seed_required=True)
    add_dgp(p)
    p.add_argument("--c-g", type=float, default=5.0)
    p.add_argument("--grid-points", type=int, default=81)

    p = sub.add_parser("simulate-linear", help="linear bias/coverage study")
    add_common(p, seed_required=True)
    add_dgp(p)

    p = sub.add_parser("rate", help="empirical convergence-rate experiment")
    add_common(p, seed_required=True)
    add_dgp(p)
    p.add_argument("--c-g", type=float, default=5.0)
    p.add_argument("--ns", default="500,1000,2000,4000", help="comma-separated sizes")

    def add_fit_args(p):
        p.add_argument("--data", required=True)
        p.add_argument("--outcome", required=True)
        p.add_argument("--covariate", required=True)
        p.add_argument("--instrument", required=True)
        p.add_argument("--controls", default="", help="comma-separated column names")
        p.add_argument("--degree", type=int, default=2)
        p.add_argument("--knots", type=int, default=2)
        p.add_argument("--floor", type=float, default=0.01)

    p = sub.add_parser("fit", help="FPW series fit from a CSV file")
    add_common(p, seed_required=False)
    add_fit_args(p)

    p = sub.add_parser("band", help="fit plus uniform confidence band")
    add_common(p, seed_required=False)
    add_fit_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument(
        "--multiplier", default="mammen", choices=["normal", "rademacher", "mammen"]
    )

    return parser


def _read_config(path) -> list[str]:
    """Turn a key=value file into a flag list (flags on argv override)."""
    flags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise _UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            flags.extend([f"--{key.strip()}", value.strip()])
    return flags


def _splice_config(argv: list[str]) -> list[str]:
    if not argv:
        return argv
    rest = list(argv[1:])
    path = None
    cleaned = []
    i = 0
    while i < len(rest):
        if rest[i] == "--config":
            if i + 1 >= len(rest):
                raise _UsageError("--config needs a file path")
            path = rest[i + 1]
            i += 2
        elif rest[i].startswith("--config="):
            path = rest[i].split("=", 1)[1]
            i += 1
        else:
            cleaned.append(rest[i])
            i += 1
    if path is None:
        return argv
    return [argv[0], *_read_config(path), *cleaned]


def _fit_from_args(args):
    controls = tuple(c for c in args.controls.split(",") if c)
    cmap = ColumnMap(
        outcome=args.outcome,
        covariate=args.covariate,
        instrument=args.instrument,
        controls=controls,
    )
    sample = load_csv(args.data, cmap)
    md_cfg = MdConfig(floor=args.floor)
    phi = estimate_selection_probability(sample, md_cfg)
    spec_p = spec_from_data(sample.x_observed, degree=args.degree, n_interior=args.knots)
    fit = fit_fpw_series(sample, phi, spec_p)
    return sample, phi, fit


def _cmd_fit(args) -> str:
    sample, phi, fit = _fit_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "fit.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        for j, g in enumerate(fit.gamma):
            writer.writerow([f"gamma_{j}", repr(float(g))])
        for j, c in enumerate(fit.control_coefs):
            writer.writerow([f"control_{j}", repr(float(c))])
        writer.writerow(["n", sample.n])
        writer.writerow(["n_selected", sample.n_selected])
        writer.writerow(["clamp_count", fit.clamp_count])
        writer.writerow(["used_pseudoinverse", int(fit.used_pseudoinverse)])
        writer.writerow(["first_stage_objective", repr(float(phi.objective_value))])
        writer.writerow(["first_stage_converged", int(phi.converged)])
    return f"fit: {sample.n_selected}/{sample.n} selected rows -> {path}"


def _cmd_band(args) -> str:
    sample, phi, fit = _fit_from_args(args)
    lo, hi = np.quantile(fit.x_sel, [0.05, 0.95])
    grid = np.linspace(lo, hi, args.grid_points)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    band = uniform_band(
        fit, grid, alpha=args.alpha, n_boot=args.n_boot, dist=args.multiplier, rng=rng
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "band.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "estimate", "se", "lower", "upper"])
        for i in range(band.grid.size):
            writer.writerow(
                [
                    band.grid[i],
                    band.estimates[i],
                    band.se[i],
                    band.lower[i],
                    band.upper[i],
                ]
            )
    return (
        f"band: critical value {band.critical_value:.3f} "
        f"({args.multiplier}, B={args.n_boot}) -> {path}"
    )


def run_command(argv) -> int:
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        argv = _splice_config(list(argv))
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1

    try:
        if args.command == "simulate-linear":
            cfg = DgpConfig(
                n=args.n,
                rho=args.rho,
                sigma_u2=args.sigma_u2,
                selection_scale=args.selection_scale,
                seed=args.seed,
            )
            result = run_linear_study(cfg, args.reps)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_linear_csv(result, out / "linear_study.csv")
            summary = (
                f"simulate-linear: {result.reps_used}/{result.reps_requested} reps "
                f"in {result.runtime_s:.1f}s -> {out / 'linear_study.csv'}"
            )
        elif args.command == "simulate-nonlinear":
            cfg = DgpConfig(
                n=args.n,
                rho=args.rho,
                sigma_u2=args.sigma_u2,
                c_g=args.c_g,
                selection_scale=args.selection_scale,
                seed=args.seed,
            )
            grid = np.linspace(0.1, 0.9, args.grid_points)
            result = run_nonlinear_study(cfg, args.reps, grid=grid)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_curves_csv(result, out / "nonlinear_curves.csv")
            summary = (
                f"simulate-nonlinear: {result.reps_used}/{result.reps_requested} reps "
                f"in {result.runtime_s:.1f}s -> {out / 'nonlinear_curves.csv'}"
            )
        elif args.command == "rate":
            cfg = DgpConfig(
                n=1000,
                rho=args.rho,
                sigma_u2=args.sigma_u2,
                c_g=args.c_g,
                selection_scale=args.selection_scale,
                seed=args.seed,
            )
            try:
                ns = [int(s) for s in args.ns.split(",") if s]
            except ValueError:
                print(f"error: cannot parse --ns {args.ns!r}", file=sys.stderr)
                return 1
            result = rate_experiment(ns, cfg, args.reps)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            path = out / "rate.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["n", "median_sq_error"])
                for n, e in zip(result.ns, result.median_errors):
                    writer.writerow([n, e])
            summary = f"rate: slope {result.slope:.3f} -> {path}"
        elif args.command == "fit":
            summary = _cmd_fit(args)
        elif args.command == "band":
            summary = _cmd_band(args)
        else:  # pragma: no cover - argparse limits choices
            return 1
    except (ValueError, OSError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2

    print(summary)
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run_command(sys.argv[1:]))
