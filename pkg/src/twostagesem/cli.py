"""Command-line interface.

Subcommands::

    twostagesem fit           --data d.csv --stage1 m1.yaml --stage2 m2.yaml --basis quadratic
    twostagesem predict-curve --data d.csv --stage1 m1.yaml --stage2 m2.yaml --grid=-3:3:61
    twostagesem cv            --data d.csv --stage1 m1.yaml --stage2 m2.yaml --df 1..6 --nmix 1..3
    twostagesem simulate      --scenario quadratic-normal --n 1000 --reps 500 --seed 7

Exit status is 0 on success, 1 on usage or input errors and 2 on
numerical failures; errors print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import ConvergenceError, DataError, NumericalError, SemError, SpecError
from .model import SemSpec
from .predict import make_basis
from .simgen import (CATALOG, IVEstimator, TruthEstimator, TwoStageEstimator, default_estimators,
                     get_scenario, reports_to_csv, run_mc)
from .twostage import predict_curve, twostage_cv, twostage_fit

THREADS_ENV = "TWOSTAGESEM_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    """Bad flags or input files (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------- parsing
def parse_range(text: str) -> list[int]:
    """``"1..6"`` -> [1, ..., 6]; ``"1,3,5"`` -> [1, 3, 5]."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"invalid integer range {text!r} (use 'a..b' or 'a,b,c')") from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"invalid number list {text!r}") from None


def parse_grid(text: str) -> np.ndarray:
    """``"lo:hi:n"`` (n equidistant points) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        try:
            lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        except (ValueError, IndexError):
            raise UsageError(f"invalid grid {text!r} (use 'lo:hi:n')") from None
        if n < 1:
            raise UsageError("grid needs at least one point")
        return np.linspace(lo, hi, n)
    return np.asarray(parse_floats(text))


def resolve_threads(flag: int | None) -> int:
    """Thread count: the environment variable overrides the flag."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    else:
        n = 1 if flag is None else flag
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def read_data(path) -> pd.DataFrame:
    """Read a headered UTF-8 CSV; malformed numeric cells are reported by row."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(p, encoding="utf-8", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    for col in frame.columns:
        if frame[col].dtype == object:
            num = pd.to_numeric(frame[col], errors="coerce")
            bad = num.isna() & frame[col].notna()
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise UsageError(
                    f"malformed numeric cell in column {col!r} at row {row}: {frame[col].iloc[row]!r}")
            frame[col] = num
    return frame


def read_spec(path) -> SemSpec:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model spec file not found: {path}")
    return SemSpec.load(p)


def check_schema(frame: pd.DataFrame, stage1: SemSpec, stage2: SemSpec) -> None:
    # stage-2 covariates may name basis predictions; those are checked by the fit
    need = list(dict.fromkeys([*stage1.observed, *stage1.covariates, *stage2.observed]))
    absent = [c for c in need if c not in frame.columns]
    if absent:
        raise UsageError(f"data columns do not match the model spec; missing {absent}")


def write_output(text: str, out: str | None) -> None:
    """Write ``text`` to ``out`` atomically (or to stdout)."""
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    dest = Path(out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=f".{dest.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, dest)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _frame_csv(frame: pd.DataFrame, index: bool = False) -> str:
    buf = io.StringIO()
    frame.to_csv(buf, index=index, float_format="%.17g", lineterminator="\n")
    return buf.getvalue()


# ---------------------------------------------------------------- commands
def _basis(args):
    opts = {"degree": args.degree, "power": args.power, "tau": args.tau, "df": args.df}
    if args.knots:
        opts["knots"] = parse_floats(args.knots)
    if args.basis == "piecewise" and args.tau is None:
        raise UsageError("--basis piecewise requires --tau")
    return make_basis(args.basis, **opts)


def _fit(args):
    frame = read_data(args.data)
    s1, s2 = read_spec(args.stage1), read_spec(args.stage2)
    check_schema(frame, s1, s2)
    return twostage_fit(s1, s2, _basis(args), frame, mixture_K=args.mixture,
                        target=args.target, restarts=args.restarts, seed=args.seed,
                        missing=args.missing)


def cmd_fit(args) -> str:
    fit = _fit(args)
    if args.format == "csv":
        return _frame_csv(fit.table(), index=True)
    if args.format == "report":
        return fit.report() + "\n"
    return fit.table().to_string(float_format=lambda v: f"{v:.6g}") + "\n"


def cmd_predict_curve(args) -> str:
    fit = _fit(args)
    grid = parse_grid(args.grid)
    curve = predict_curve(fit, grid, level=args.level)
    if args.format == "csv":
        return _frame_csv(curve)
    return curve.to_string(index=False, float_format=lambda v: f"{v:.6g}") + "\n"


def cmd_cv(args) -> str:
    frame = read_data(args.data)
    s1, s2 = read_spec(args.stage1), read_spec(args.stage2)
    check_schema(frame, s1, s2)
    rep = twostage_cv(s1, s2, frame, df_grid=parse_range(args.df), nmix_grid=parse_range(args.nmix),
                      folds=args.folds, reps=args.cv_reps, seed=args.seed, target=args.target,
                      restarts=args.restarts, fit_final=args.format == "report",
                      missing=args.missing)
    if args.format == "csv":
        rows = [("aic", k, v) for k, v in rep.aic.items()]
        rows += [("rmse", d, v) for d, v in rep.rmse.items()]
        rows += [("selected_K", rep.selected_K, np.nan), ("selected_df", rep.selected_df, np.nan)]
        return _frame_csv(pd.DataFrame(rows, columns=["quantity", "key", "value"]))
    text = rep.summary() + "\n"
    if args.format == "report" and rep.fit is not None:
        text += rep.fit.report() + "\n"
    return text


_ESTIMATORS = {
    "2SSEM": lambda: TwoStageEstimator(),
    "2SSEM-mixture": lambda: TwoStageEstimator(K=2),
    "2SLS": lambda: IVEstimator(robust=False),
    "2SLS-robust": lambda: IVEstimator(robust=True),
    "truth": lambda: TruthEstimator(),
}


def cmd_simulate(args) -> str:
    try:
        sc = get_scenario(args.scenario, n=args.n, seed=args.seed)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    if args.estimators:
        names = [e.strip() for e in args.estimators.split(",") if e.strip()]
        unknown = [e for e in names if e not in _ESTIMATORS]
        if unknown:
            raise UsageError(f"unknown estimators {unknown}; available: {sorted(_ESTIMATORS)}")
        est = {e.replace("-", " "): _ESTIMATORS[e]() for e in names}
    else:
        est = default_estimators(sc)
    reports = run_mc(sc, est, reps=args.reps, seed=args.seed, threads=resolve_threads(args.threads))
    if args.format == "csv":
        return reports_to_csv(reports)
    blocks = []
    for name, r in reports.items():
        blocks.append(f"{name}  ({r.reps - r.failures}/{r.reps} replications used)")
        blocks.append(r.table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        blocks.append("")
    return "\n".join(blocks)


# ------------------------------------------------------------------- parser
def _common(p, fmt_default="pretty"):
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (overridden by ${THREADS_ENV})")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--format", choices=["csv", "pretty", "report"], default=fmt_default)


def _model_args(p, with_basis=True):
    p.add_argument("--data", required=True, help="headered CSV file")
    p.add_argument("--stage1", required=True, help="stage-1 model spec (YAML)")
    p.add_argument("--stage2", required=True, help="stage-2 model spec (YAML)")
    p.add_argument("--target", default=None, help="stage-2 latent with the non-linear effect")
    p.add_argument("--restarts", type=int, default=5, help="EM restarts for mixtures")
    p.add_argument("--missing", choices=["raise", "drop"], default="raise")
    if with_basis:
        p.add_argument("--basis", default="quadratic",
                       choices=["linear", "quadratic", "cubic", "polynomial", "exponential",
                                "piecewise", "spline"])
        p.add_argument("--degree", type=int, default=None)
        p.add_argument("--power", type=float, default=None, help="exponential basis rate")
        p.add_argument("--knots", default=None, help="comma-separated spline knots")
        p.add_argument("--df", type=int, default=None, help="spline degrees of freedom")
        p.add_argument("--tau", type=float, default=None, help="piecewise breakpoint")
        p.add_argument("--mixture", type=int, default=None, metavar="K",
                       help="Gaussian-mixture stage 1 with K components")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostagesem", description="Two-stage estimation for non-linear SEMs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a two-stage model and print the parameter table")
    _model_args(p)
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict-curve", help="fitted structural curve on a latent grid")
    _model_args(p)
    p.add_argument("--grid", default="-3:3:61", help="'lo:hi:n' or comma-separated values")
    p.add_argument("--level", type=float, default=0.95)
    _common(p, fmt_default="csv")
    p.set_defaults(func=cmd_predict_curve)

    p = sub.add_parser("cv", help="select mixture size by AIC and spline df by K-fold CV")
    _model_args(p, with_basis=False)
    p.add_argument("--df", default="1..6", help="df grid, e.g. 1..6")
    p.add_argument("--nmix", default="1", help="mixture sizes, e.g. 1..3")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--cv-reps", type=int, default=1, help="CV repetitions")
    _common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="Monte Carlo study of a catalog scenario")
    p.add_argument("--scenario", required=True,
                   help="scenario name or family, e.g. " + ", ".join(sorted(CATALOG)[:3]))
    p.add_argument("--n", type=int, default=None, help="sample size override")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--estimators", default=None,
                   help="comma-separated subset of: " + ", ".join(_ESTIMATORS))
    _common(p, fmt_default="csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        text = args.func(args)
        write_output(text, args.out)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SpecError, SemError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
