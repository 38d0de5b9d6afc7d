"""Command-line front end: ``balance-att {estimate,simulate,expand,series}``.

Every artifact carries a provenance block with the resolved configuration,
seed and package version. JSON output embeds it; CSV and table output get a
``<out>.provenance.json`` sidecar when written to a file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .balancing import LINKS, get_link
from .data_model import (
    DataError,
    Dataset,
    ExpansionSpec,
    add_intercept,
    expand_covariates,
    load_csv,
    read_table,
    write_csv,
)
from .estimators import AttEstimate, Tuning, counterfactual_series, estimate
from .simulation import DEFAULT_ESTIMATORS, ZETA_CONVENTIONS, run_study
from .solver import DEFAULT_TOL

PROG = "balance-att"
SEED_ENV = "BALANCE_ATT_SEED"
ESTIMATE_CHOICES = ("naive", "immunized", "farrell", "double_selection", "ols", "lowdim")
SIMULATE_CHOICES = ESTIMATE_CHOICES + ("oracle",)
ESTIMATE_DEFAULT = ("naive", "immunized", "farrell", "double_selection", "ols")


class CliError(Exception):
    pass


# -- argument types --------------------------------------------------------------


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _unit_float(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _c_level(s):
    v = float(s)
    if not v > 1:
        raise argparse.ArgumentTypeError(f"must exceed 1, got {v}")
    return v


def parse_grid(text):
    """``"n=500,1000 p=50"`` -> ``[(500, 50), (1000, 50)]`` (n-major order)."""
    parts = {}
    for tok in text.split():
        key, sep, vals = tok.partition("=")
        if not sep or key not in ("n", "p") or key in parts:
            raise argparse.ArgumentTypeError(f"bad grid token {tok!r}; expected n=... p=...")
        try:
            parts[key] = [int(v) for v in vals.split(",") if v]
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-integer value in {tok!r}") from None
        if not parts[key] or min(parts[key]) < 1:
            raise argparse.ArgumentTypeError(f"grid values must be positive integers in {tok!r}")
    if set(parts) != {"n", "p"}:
        raise argparse.ArgumentTypeError("grid needs both n=... and p=...")
    if min(parts["p"]) < 20:
        raise argparse.ArgumentTypeError("simulation designs need p >= 20")
    return list(itertools.product(parts["n"], parts["p"]))


def _seed(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {s!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, estimators=None, default_format="csv"):
        p.add_argument("--out", help="output path (default: standard output)")
        p.add_argument("--format", choices=("json", "csv", "table"), default=default_format)
        p.add_argument("--seed", type=_seed, help=f"base seed (fallback: ${SEED_ENV}, then 0)")
        if estimators is None:
            return
        p.add_argument("--link", choices=sorted(LINKS), default="exp")
        p.add_argument("--gamma", type=_unit_float, default=0.05)
        p.add_argument("--c", type=_c_level, default=1.1)
        p.add_argument("--eps", type=_positive_float, default=1e-4)
        p.add_argument("--k0", type=_positive_int, default=15)
        p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL)
        p.add_argument("--alpha", type=_unit_float, default=0.05)
        if estimators:
            p.add_argument("--estimator", action="append", choices=estimators,
                           help="repeatable; default: %(default)s")

    def data_flags(p, outcome_help="outcome column"):
        p.add_argument("--input", required=True)
        p.add_argument("--outcome", required=True, help=outcome_help)
        p.add_argument("--treatment", required=True)
        p.add_argument("--covariates", default="rest",
                       help="comma-separated names, or 'rest' for all remaining columns")

    p = sub.add_parser("estimate", help="ATT estimates on a CSV dataset")
    data_flags(p)
    common(p, ESTIMATE_CHOICES, "json")

    p = sub.add_parser("simulate", help="Monte Carlo study on the built-in design")
    common(p, SIMULATE_CHOICES)
    p.add_argument("--grid", type=parse_grid, default=parse_grid("n=1000 p=50"),
                   help='e.g. "n=500,1000 p=50"')
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--zeta", choices=ZETA_CONVENTIONS, default="printed",
                   help="effect-size convention for the design")

    p = sub.add_parser("expand", help="write a covariate-expanded copy of a CSV dataset")
    data_flags(p)
    common(p)

    p = sub.add_parser("series", help="per-period immunized ATT for several outcome columns")
    data_flags(p, "comma-separated outcome columns, one per period")
    common(p, ())
    return parser


# -- helpers ---------------------------------------------------------------------------


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed, "flag"
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return _seed(env.strip()), "env"
        except argparse.ArgumentTypeError as exc:
            raise CliError(f"{SEED_ENV}: {exc}") from None
    return 0, "default"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(args, seed, seed_source, **extra):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("seed", "func")}
    if "grid" in cfg:
        cfg["grid"] = [list(c) for c in cfg["grid"]]
    out = {"tool": PROG, "version": __version__, "command": args.command,
           "config": cfg, "seed": seed, "seed_source": seed_source}
    if hasattr(args, "gamma"):
        out["tuning"] = asdict(_tuning(args))
    if getattr(args, "input", None):
        out["input_sha256"] = _sha256(args.input)
    out.update(extra)
    return out


def _tuning(args):
    return Tuning(gamma=args.gamma, c=args.c, eps=args.eps, k0=args.k0, tol=args.tol)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def _dump_json(obj):
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def _emit(args, text, provenance):
    """Write ``text`` to ``--out`` (with a provenance sidecar for non-JSON) or stdout."""
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        if args.format != "json":
            Path(args.out + ".provenance.json").write_text(_dump_json(provenance), encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def _load(args, outcome=None, covariates=None) -> Dataset:
    ds = load_csv(args.input, outcome or args.outcome, args.treatment,
                  args.covariates if covariates is None else covariates)
    return ds if ds.intercept_index is not None else add_intercept(ds)


# -- commands ----------------------------------------------------------------------


def cmd_estimate(args) -> int:
    seed, src = _resolve_seed(args)
    names = list(dict.fromkeys(args.estimator or ESTIMATE_DEFAULT))
    ds = _load(args)
    results = estimate(ds, names, get_link(args.link), args.alpha, _tuning(args))
    prov = _provenance(args, seed, src, estimators=names)
    failed = {k: f"{type(v).__name__}: {v}" for k, v in results.items()
              if not isinstance(v, AttEstimate)}
    if args.format == "json":
        body = {name: (res.to_dict() if isinstance(res, AttEstimate) else {"error": failed[name]})
                for name, res in results.items()}
        text = _dump_json({"provenance": prov, "n": ds.n, "n1": ds.n1, "p": ds.p,
                           "estimates": body})
    else:
        header = ["estimator", "theta", "se", "ci_low", "ci_high", "n", "n1",
                  "beta_active", "mu_active", "error"]
        rows = []
        for name, res in results.items():
            if isinstance(res, AttEstimate):
                d = res.diagnostics
                rows.append([name, res.theta, res.se, res.ci_low, res.ci_high, res.n, res.n1,
                             d.get("beta_active"), d.get("mu_active"), None])
            else:
                rows.append([name, None, None, None, None, ds.n, ds.n1, None, None, failed[name]])
        if args.format == "csv":
            text = _csv_text(header, rows)
        else:
            lines = [f"{'estimator':<18}{'theta':>12}{'se':>12}{'ci_low':>12}{'ci_high':>12}"]
            for r in rows:
                if r[-1] is None:
                    lines.append(f"{r[0]:<18}" + "".join(f"{v:12.4f}" for v in r[1:5]))
                else:
                    lines.append(f"{r[0]:<18}  failed: {r[-1]}")
            lines.append(f"n={ds.n} n1={ds.n1} p={ds.p} alpha={args.alpha}")
            text = "\n".join(lines) + "\n"
    _emit(args, text, prov)
    if failed:
        raise CliError("estimator failures: " + "; ".join(f"{k}: {v}" for k, v in failed.items()))
    return 0


def cmd_simulate(args) -> int:
    seed, src = _resolve_seed(args)
    names = list(dict.fromkeys(args.estimator or DEFAULT_ESTIMATORS))
    report = run_study(args.grid, names, args.reps, seed, _tuning(args), args.jobs, args.zeta,
                       alpha=args.alpha)
    prov = _provenance(args, seed, src, estimators=names)
    if args.format == "csv":
        text = report.to_csv()
    elif args.format == "table":
        text = report.to_table()
    else:
        text = _dump_json({"provenance": prov, "rows": [asdict(r) for r in report.rows]})
    _emit(args, text, prov)
    return 0


def cmd_expand(args) -> int:
    seed, src = _resolve_seed(args)
    if args.format != "csv":
        raise CliError("expand writes CSV only")
    if not args.out:
        raise CliError("expand needs --out")
    ds = load_csv(args.input, args.outcome, args.treatment, args.covariates)
    cont = [n for n, k in zip(ds.col_names, ds.col_kinds) if k == "continuous"]
    dums = [n for n, k in zip(ds.col_names, ds.col_kinds) if k == "dummy"]
    spec = ExpansionSpec(tuple(cont), tuple(dums))
    out = expand_covariates(ds, spec)
    write_csv(args.out, out, args.outcome, args.treatment)
    prov = _provenance(args, seed, src, continuous=cont, dummies=dums, max_power=spec.max_power,
                       columns_in=ds.p, columns_out=out.p)
    Path(args.out + ".provenance.json").write_text(_dump_json(prov), encoding="utf-8")
    return 0


def cmd_series(args) -> int:
    seed, src = _resolve_seed(args)
    periods = [c.strip() for c in args.outcome.split(",") if c.strip()]
    if not periods:
        raise CliError("--outcome needs at least one period column")
    if len(set(periods)) != len(periods):
        raise CliError("duplicate period columns in --outcome")
    header, body = read_table(args.input)
    for name in periods:
        if name not in header:
            raise DataError(f"missing column {name!r}")
    covs = args.covariates
    if covs == "rest":
        covs = [h for h in header if h not in periods and h != args.treatment]
    ds = _load(args, periods[0], covs)
    outcomes = {name: body[:, header.index(name)] for name in periods}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        points = counterfactual_series(ds, outcomes, get_link(args.link), _tuning(args), args.alpha)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    prov = _provenance(args, seed, src, periods=periods)
    header_out = ["period", "theta", "se", "ci_low", "ci_high", "counterfactual_level"]
    rows = []
    for pt in points:
        e = pt.estimate
        if e is None:
            rows.append([pt.period, None, None, None, None, None])
            print(f"warning: period {pt.period}: {pt.error}", file=sys.stderr)
        else:
            rows.append([pt.period, e.theta, e.se, e.ci_low, e.ci_high, pt.counterfactual_level])
    if args.format == "json":
        text = _dump_json({"provenance": prov, "series": [dict(zip(header_out, r)) for r in rows]})
    elif args.format == "csv":
        text = _csv_text(header_out, rows)
    else:
        lines = [f"{'period':<14}{'theta':>12}{'se':>12}{'counterfactual':>16}"]
        for r in rows:
            cells = "".join("{:12.4f}".format(v) if v is not None else f"{'nan':>12}" for v in r[1:3])
            cf = f"{r[5]:16.4f}" if r[5] is not None else f"{'nan':>16}"
            lines.append(f"{r[0]:<14}{cells}{cf}")
        text = "\n".join(lines) + "\n"
    _emit(args, text, prov)
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "expand": cmd_expand,
            "series": cmd_series}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (CliError, DataError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": msg}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
