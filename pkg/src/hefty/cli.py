"""Command-line front end: ``hefty fit | estimate | simulate | gridsearch``.

Every subcommand accepts ``--config FILE`` (JSON); flags given on the
command line override the file. Seeds fall back to ``$HEFTY_SEED`` and then
to 0.

Exit codes: 0 success, 2 malformed input, 3 numerical or estimator failure,
4 configuration error, 5 too many failed simulation replications.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CovariateError, HeftyError, SimulationFailure
from .estimators import Dataset
from .simharness import (
    DEFAULT_GRID,
    PairedPeriodSpec,
    SimulationSpec,
    MethodSpec,
    build_lookup_table,
    fmt,
    run_paired_suite,
    run_suite,
)
from .tail_model import MixtureParams, fit_mixture, segment_qq_deviation

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG, EXIT_SIMULATION = 0, 2, 3, 4, 5
DEFAULT_SEED = 0
ESTIMATE_HEADER = ("method", "effect_abs", "lift", "std_err", "z", "p")

# estimate flags and the method kinds that understand them
METHOD_FLAGS = {
    "percentile": {"winsorized"},
    "mode": {"winsorized"},
    "delta_mode": {"huber", "huber_per_arm"},
    "clip": {"psm", "doubly_robust", "dml"},
    "k_folds": {"dml"},
    "aggregation": {"dml"},
}


class InputError(Exception):
    """Malformed input file (exit 2)."""


class ConfigError(Exception):
    """Invalid or incomplete configuration (exit 4)."""


# -- configuration -----------------------------------------------------------------


def load_config(args: argparse.Namespace) -> dict:
    """Merge the JSON config file (if any) with explicitly given flags."""
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for key, value in vars(args).items():
        if key not in ("config", "command", "handler") and value is not None:
            cfg[key] = value
    return cfg


def resolve_seed(cfg: dict) -> int:
    seed = cfg.get("seed")
    if seed is None:
        seed = os.environ.get("HEFTY_SEED", DEFAULT_SEED)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}")
    return seed


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    return [cfg[k] for k in keys]


def _input_path(value) -> Path:
    path = Path(value)
    if not path.is_file():
        raise InputError(f"input file {path} does not exist")
    return path


def _output_path(value) -> Path:
    path = Path(value)
    if not path.parent.exists():
        raise ConfigError(f"output directory {path.parent} does not exist")
    return path


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_params(value) -> MixtureParams:
    try:
        if isinstance(value, dict):
            return MixtureParams.from_dict(value)
        path = Path(value)
        if not path.is_file():
            raise ConfigError(f"params file {path} does not exist")
        return MixtureParams.from_json(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mixture parameters: {exc}") from None


def _as_list(value, cast):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    try:
        return [cast(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse list {value!r}: {exc}") from None


def _methods(value) -> list:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    out = []
    for m in value:
        try:
            out.append(MethodSpec(m) if isinstance(m, str) else _method_from_dict(m))
        except (HeftyError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    if not out:
        raise ConfigError("no methods requested")
    return out


def _method_from_dict(m: dict) -> MethodSpec:
    m = dict(m)
    kind = m.pop("kind", None) or m.pop("name")
    label = m.pop("label", "")
    return MethodSpec(kind, label, tuple(sorted(m.items())))


# -- CSV input ---------------------------------------------------------------------


def _read_rows(path: Path, required: tuple):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if tuple(header[: len(required)]) != required:
            raise InputError(f"{path}: header must start with {','.join(required)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            rows.append((lineno, row))
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, rows


def _number(text: str, path: Path, lineno: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"{path}: row {lineno}: {column}={text!r} is not a number") from None
    if not np.isfinite(v):
        raise InputError(f"{path}: row {lineno}: {column} is not finite")
    return v


def read_response_csv(path: Path) -> np.ndarray:
    """Read a one-column CSV with header ``y`` of nonnegative responses."""
    _, rows = _read_rows(path, ("y",))
    out = np.empty(len(rows))
    for i, (lineno, row) in enumerate(rows):
        v = _number(row[0], path, lineno, "y")
        if v < 0:
            raise InputError(f"{path}: row {lineno}: y={row[0]} is negative")
        out[i] = v
    return out


def read_experiment_csv(path: Path) -> Dataset:
    """Read ``unit_id,y,t[,x1,...]`` into a Dataset."""
    header, rows = _read_rows(path, ("unit_id", "y", "t"))
    names = tuple(header[3:])
    y = np.empty(len(rows))
    t = np.empty(len(rows), dtype=np.int8)
    x = np.empty((len(rows), len(names)))
    for i, (lineno, row) in enumerate(rows):
        y[i] = _number(row[1], path, lineno, "y")
        tv = row[2].strip()
        if tv not in ("0", "1"):
            raise InputError(f"{path}: row {lineno}: t={tv!r} must be 0 or 1")
        t[i] = int(tv)
        for j, name in enumerate(names):
            x[i, j] = _number(row[3 + j], path, lineno, name)
    if t.min() == t.max():
        raise InputError(f"{path}: both arms must be present")
    return Dataset(y, t, x if names else None, names)


# -- subcommands -------------------------------------------------------------------


def cmd_fit(cfg: dict) -> int:
    inp, cutoff, out = _require(cfg, "input", "cutoff", "output")
    sample = read_response_csv(_input_path(inp))
    out = _output_path(out)
    params = fit_mixture(sample, float(cutoff))
    _write(out, params.to_json() + "\n")
    zeros = int(np.sum(sample == 0))
    tail = int(np.sum(sample >= params.cutoff_c))
    gaps = segment_qq_deviation(sample, params)
    print(f"segments: zero={zeros} torso={sample.size - zeros - tail} tail={tail}")
    print(f"qq max abs gap: torso={fmt(gaps['torso'])} tail={fmt(gaps['tail'])}")
    return EXIT_OK


def cmd_estimate(cfg: dict) -> int:
    (inp,) = _require(cfg, "input")
    methods = _methods(cfg.get("method") or ["naive"])
    data = read_experiment_csv(_input_path(inp))
    seed = resolve_seed(cfg)
    flags = {k: cfg[k] for k in METHOD_FLAGS if cfg.get(k) is not None}
    for m in methods:
        if m.needs_covariates and data.covariates is None:
            raise CovariateError(f"method {m.label!r} needs covariate columns x1..xk in the input")
    lines = [",".join(ESTIMATE_HEADER)]
    for m in methods:
        opts = dict(m.options)
        opts.update({k: v for k, v in flags.items() if m.base_kind in METHOD_FLAGS[k]})
        r = MethodSpec(m.kind, m.label, tuple(sorted(opts.items()))).run(data, seed)
        lines.append(",".join([m.label] + [fmt(v) for v in (r.effect_abs, r.lift, r.std_err, r.z_stat, r.p_value)]))
    print("\n".join(lines))
    return EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    params_ref, out = _require(cfg, "params", "output")
    params = _load_params(params_ref)
    out = _output_path(out)
    pvalues = _output_path(cfg["pvalues"]) if cfg.get("pvalues") else None
    methods = _methods(cfg.get("methods", ["naive"]))
    seed = resolve_seed(cfg)
    lift = float(cfg.get("lift", 0.0))
    n_per_arm = int(cfg.get("n_per_arm", 100_000))
    n_reps = int(cfg.get("reps", 500))
    alpha_level = float(cfg.get("alpha_level", 0.1))
    workers = cfg.get("workers")
    generator = cfg.get("generator", "mixture")
    if generator == "mixture" and any(m.needs_covariates for m in methods):
        raise ConfigError("covariate methods need the paired generator (--generator paired)")
    try:
        if generator == "mixture":
            spec = SimulationSpec(params, lift, n_per_arm, n_reps, tuple(methods), seed, alpha_level)
            report = run_suite(spec, workers)
        elif generator == "paired":
            spec = PairedPeriodSpec(params, float(cfg.get("noise_cv", 0.3)), lift)
            report = run_paired_suite(spec, n_per_arm, n_reps, methods, seed, alpha_level, workers)
        else:
            raise ConfigError(f"unknown generator {generator!r}; expected 'mixture' or 'paired'")
    except SimulationFailure as exc:
        if exc.report is not None:
            _write(out, exc.report.to_csv())
        raise
    _write(out, report.to_csv())
    if pvalues is not None:
        _write(pvalues, report.pvalues_csv())
    return EXIT_OK


def cmd_gridsearch(cfg: dict) -> int:
    params_ref, out = _require(cfg, "params", "output")
    params = _load_params(params_ref)
    out = _output_path(out)
    lookup = _output_path(cfg["lookup"]) if cfg.get("lookup") else None
    sizes = _as_list(cfg.get("sizes", cfg.get("n_per_arm", 100_000)), lambda v: int(float(v)))
    lifts = _as_list(cfg.get("lifts", cfg.get("lift", 0.0)), float)
    grid = _as_list(cfg.get("grid", list(DEFAULT_GRID)), float)
    table = build_lookup_table(
        params, sizes, lifts, grid, int(cfg.get("reps", 200)), resolve_seed(cfg), cfg.get("workers")
    )
    if len(table.cells) == 1:
        _write(out, table.cells[0].to_csv())
    else:
        _write(out, table.curves_csv())
    if lookup is not None or len(table.cells) > 1:
        _write(lookup or out.with_name(out.stem + "_lookup.csv"), table.to_csv())
    for c in table.cells:
        print(f"n_per_arm={c.n_per_arm} lift={fmt(c.lift)} optimal_percentile={fmt(c.argmin)} min_mse={fmt(c.min_mse)}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hefty", description="Heavy-tailed A/B test estimation and simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        s = sub.add_parser(name, help=help_text, argument_default=None)
        s.add_argument("--config", help="JSON file of settings; flags override it")
        s.set_defaults(handler=handler)
        return s

    s = add("fit", cmd_fit, "fit the three-piece mixture to a response sample")
    s.add_argument("--input", help="CSV with header y")
    s.add_argument("--cutoff", type=float, help="torso/tail cutoff C")
    s.add_argument("--output", help="path of the params JSON to write")

    s = add("estimate", cmd_estimate, "estimate the treatment effect of an experiment file")
    s.add_argument("--input", help="CSV with header unit_id,y,t[,x1,...]")
    s.add_argument("--method", action="append", help="method id; repeat for several")
    s.add_argument("--percentile", type=float, help="winsorization percentile")
    s.add_argument("--mode", choices=("separate", "unified_union", "unified_average"), help="winsorization mode")
    s.add_argument("--delta-mode", choices=("raw_sd", "robust_scale"), help="Huber tuning scale")
    s.add_argument("--clip", type=float, help="propensity clamp")
    s.add_argument("--k-folds", type=int, help="cross-fitting folds")
    s.add_argument("--aggregation", choices=("pooled", "per_fold"), help="cross-fit aggregation")
    s.add_argument("--seed", type=int, help="seed for randomized steps (cross-fitting)")

    s = add("simulate", cmd_simulate, "run a replication suite and write its report CSV")
    s.add_argument("--params", help="mixture params JSON")
    s.add_argument("--generator", choices=("mixture", "paired"), help="data generator")
    s.add_argument("--noise-cv", type=float, help="paired generator noise CV")
    s.add_argument("--lift", type=float, help="injected lift")
    s.add_argument("--n-per-arm", type=int, help="units per arm")
    s.add_argument("--reps", type=int, help="replications")
    s.add_argument("--methods", help="comma-separated method ids")
    s.add_argument("--alpha-level", type=float, help="significance level for the FPR")
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    s.add_argument("--output", help="report CSV path")
    s.add_argument("--pvalues", help="also write per-replication p-values here")

    s = add("gridsearch", cmd_gridsearch, "MSE of unified winsorization over a percentile grid")
    s.add_argument("--params", help="mixture params JSON")
    s.add_argument("--sizes", help="comma-separated units per arm")
    s.add_argument("--lifts", help="comma-separated lifts")
    s.add_argument("--grid", help="comma-separated percentiles")
    s.add_argument("--reps", type=int, help="replications per cell")
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    s.add_argument("--output", help="curve CSV path")
    s.add_argument("--lookup", help="lookup-table CSV path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = args.handler
    try:
        return handler(load_config(args))
    except InputError as exc:
        print(f"hefty: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, CovariateError) as exc:
        print(f"hefty: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationFailure as exc:
        print(f"hefty: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except HeftyError as exc:
        print(f"hefty: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
