"""Command-line interface.

Input tables are comma-separated with a header: one ``y`` column, interest
covariates prefixed ``x`` and controls prefixed ``z``.  An intercept is added
to the controls unless one of the ``z`` columns is constant.

Exit status: 0 success, 1 a ``check`` property failed, 2 malformed input or
flags, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__, simulation, theory_checks
from .framework import (
    EVALUATORS,
    GUARANTEE_NOTE,
    Dataset,
    EvaluatorSpec,
    FitterSpec,
    _has_constant_column,
    dispersion_test,
    invert_ci,
    palmrt_test,
)
from .regressors import HuberConfig, QuantileConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Malformed input file, manifest or flag combination."""


class NumericalError(Exception):
    """A fitter or solver failed on otherwise valid input."""


# --------------------------------------------------------------------------
# Input
# --------------------------------------------------------------------------


@dataclasses.dataclass
class Table:
    data: Dataset
    x_columns: list[str]
    z_columns: list[str]
    intercept_added: bool
    path: str
    sha256: str


def read_table(path: str, add_intercept: bool = True) -> Table:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path} is not UTF-8 text") from exc
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise InputError("duplicate column names in header")
    if "y" not in header:
        raise InputError("missing required column 'y'")
    xcols = [h for h in header if h.startswith("x")]
    zcols = [h for h in header if h.startswith("z")]
    other = [h for h in header if h != "y" and h not in xcols and h not in zcols]
    if other:
        raise InputError(f"unrecognised columns {other}; names must be 'y' or start with 'x' or 'z'")
    if not xcols:
        raise InputError("missing interest covariate: no column name starts with 'x'")
    body = rows[1:]
    if len(body) < 2:
        raise InputError("need at least two data rows")
    values = np.empty((len(body), len(header)))
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"line {i}: expected {len(header)} fields, found {len(r)}")
        for j, cell in enumerate(r):
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise InputError(f"line {i}, column '{header[j]}': not a number: {cell!r}") from None
    if not np.all(np.isfinite(values)):
        raise InputError("input contains non-finite values")
    col = {h: values[:, j] for j, h in enumerate(header)}
    z = np.column_stack([col[h] for h in zcols]) if zcols else np.zeros((len(body), 0))
    added = add_intercept and not _has_constant_column(z)
    if added:
        z = np.column_stack([np.ones(len(body)), z])
    x = np.column_stack([col[h] for h in xcols])
    data = Dataset(col["y"], x, z)
    return Table(data, xcols, zcols, added, path, hashlib.sha256(raw).hexdigest())


def _table_config(t: Table) -> dict:
    return {
        "input": t.path,
        "input_sha256": t.sha256,
        "n": t.data.n,
        "x_columns": t.x_columns,
        "z_columns": t.z_columns,
        "intercept_added": t.intercept_added,
    }


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = ";".join(str(e) for e in v)
        else:
            out[key] = v
    return out


def _emit(doc: dict, fmt: str, output: str | None) -> None:
    if fmt == "json":
        text = json.dumps(doc, indent=2) + "\n"
    else:
        flat = _flatten(doc)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(flat))
        w.writerow([simulation._fmt(v) for v in flat.values()])
        text = buf.getvalue()
    if output is None or output == "-":
        sys.stdout.write(text)
    else:
        with open(output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _huber(args) -> HuberConfig:
    return HuberConfig(delta=args.delta, rel_tol=args.rel_tol, max_iter=args.max_iter)


def _specs(args) -> tuple[FitterSpec, EvaluatorSpec]:
    fitter = FitterSpec(args.fitter, huber=_huber(args))
    return fitter, EvaluatorSpec(args.evaluator, delta=args.delta)


def _method_config(args) -> dict:
    return {
        "fitter": args.fitter,
        "evaluator": args.evaluator,
        "delta": args.delta,
        "mad_factor": HuberConfig().mad_factor,
        "rel_tol": args.rel_tol,
        "max_iter": args.max_iter,
    }


def cmd_test(args) -> int:
    table = read_table(args.input, not args.no_intercept)
    fitter, evaluator = _specs(args)
    report = palmrt_test(table.data, fitter, evaluator, args.B, args.seed, args.ties)
    doc = {
        "command": "test",
        "version": __version__,
        "report": report.to_dict(),
        "config": {"B": args.B, "seed": args.seed, "ties": args.ties} | _method_config(args) | _table_config(table),
    }
    _emit(doc, args.format, args.output)
    return EXIT_OK


def cmd_dispersion(args) -> int:
    table = read_table(args.input, not args.no_intercept)
    x = table.data.x
    if x.shape[1] != 1:
        raise InputError("dispersion needs exactly one x column")
    if not np.all((x == 0) | (x == 1)) or x.all() or not x.any():
        raise InputError(f"column '{table.x_columns[0]}' must be a 0/1 indicator with both groups present")
    if not 0 < args.q_low < args.q_high < 1:
        raise InputError("need 0 < q-low < q-high < 1")
    report = dispersion_test(table.data, QuantileConfig(args.q_low), QuantileConfig(args.q_high), args.B, args.seed, args.ties)
    doc = {
        "command": "dispersion",
        "version": __version__,
        "report": report.to_dict(),
        "config": {"B": args.B, "seed": args.seed, "ties": args.ties, "q_low": args.q_low, "q_high": args.q_high}
        | _table_config(table),
    }
    _emit(doc, args.format, args.output)
    return EXIT_OK


def _grid(args) -> np.ndarray:
    if (args.grid is None) == (args.grid_values is None):
        raise InputError("give exactly one of --grid LO:HI:NUM and --grid-values V1,V2,...")
    try:
        if args.grid is not None:
            lo, hi, num = args.grid.split(":")
            num = int(num)
            if num < 1:
                raise ValueError
            return np.linspace(float(lo), float(hi), num)
        return np.array([float(v) for v in args.grid_values.split(",")])
    except ValueError:
        raise InputError("malformed beta grid") from None


def cmd_ci(args) -> int:
    table = read_table(args.input, not args.no_intercept)
    if table.data.x.shape[1] != 1:
        raise InputError("ci needs exactly one x column")
    grid = _grid(args)
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) < 0):
        raise InputError("beta grid must be finite and sorted")
    if not 0 <= args.alpha < 1:
        raise InputError("alpha must lie in [0, 1)")
    fitter, evaluator = _specs(args)
    ci = invert_ci(table.data, fitter, evaluator, args.B, args.seed, args.alpha, grid)
    doc = {
        "command": "ci",
        "version": __version__,
        "interval": ci.to_dict(),
        "note": GUARANTEE_NOTE,
        "config": {"B": args.B, "seed": args.seed, "alpha": args.alpha} | _method_config(args) | _table_config(table),
    }
    _emit(doc, args.format, args.output)
    return EXIT_OK


_MANIFEST_KEYS = {"study", "methods", "alphas", "settings"}
_SETTING_KEYS = {f.name for f in dataclasses.fields(simulation.SimSetting)}


def load_manifest(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise InputError(f"unknown manifest keys {sorted(unknown)}")
    for key in ("methods", "settings"):
        if key not in doc:
            raise InputError(f"manifest is missing '{key}'")
    study = doc.get("study", "power")
    if study not in ("power", "null_cdf"):
        raise InputError("study must be 'power' or 'null_cdf'")
    methods = doc["methods"]
    if not isinstance(methods, list) or not methods:
        raise InputError("methods must be a non-empty list")
    bad = [m for m in methods if m not in simulation.METHODS]
    if bad:
        raise InputError(f"unknown methods {bad}; choose from {list(simulation.METHODS)}")
    alphas = doc.get("alphas", [0.05])
    if not isinstance(alphas, list) or not alphas or not all(isinstance(a, (int, float)) and 0 < a < 1 for a in alphas):
        raise InputError("alphas must be a non-empty list of numbers in (0, 1)")
    if not isinstance(doc["settings"], list) or not doc["settings"]:
        raise InputError("settings must be a non-empty list")
    settings = []
    for i, raw in enumerate(doc["settings"]):
        if not isinstance(raw, dict):
            raise InputError(f"settings[{i}] must be an object")
        extra = set(raw) - _SETTING_KEYS
        if extra:
            raise InputError(f"settings[{i}]: unknown keys {sorted(extra)}")
        try:
            settings.append(simulation.SimSetting(**raw))
        except (TypeError, ValueError) as exc:
            raise InputError(f"settings[{i}]: {exc}") from exc
    ids = [s.id for s in settings]
    if len(set(ids)) != len(ids):
        raise InputError("settings must have distinct ids; set 'name' to disambiguate")
    return {"study": study, "methods": methods, "alphas": [float(a) for a in alphas], "settings": settings}


def _setting_columns(s: simulation.SimSetting) -> dict:
    return {
        "design": s.design,
        "error": s.error,
        "mode": s.mode,
        "n": s.effective_n(),
        "p": s.p,
        "B": s.B,
        "seed0": s.seed0,
        "seed_step": s.seed_step,
    }


def cmd_simulate(args) -> int:
    spec = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    if spec["study"] == "power":
        result = simulation.run_power_study(spec["settings"], spec["methods"], spec["alphas"], args.workers)
        by_id = {s.id: s for s in result.settings}
        aggregate = [
            {"setting": r.setting} | _setting_columns(by_id[r.setting]) | {k: v for k, v in r.to_dict().items() if k != "setting"}
            for r in result.rows
        ]
    else:
        result, table = simulation.run_null_cdf_study(spec["settings"], spec["methods"], spec["alphas"], args.workers)
        by_id = {s.id: s for s in result.settings}
        aggregate = [
            {"setting": r["setting"]} | _setting_columns(by_id[r["setting"]]) | {k: v for k, v in r.items() if k != "setting"}
            for r in table
        ]
    simulation.write_csv(os.path.join(args.out, "trials.csv"), result.trial_rows())
    simulation.write_csv(os.path.join(args.out, "aggregate.csv"), aggregate)
    doc = simulation.manifest(
        result,
        {"study": spec["study"], "version": __version__, "source_manifest": os.path.basename(args.manifest)},
    )
    simulation.write_json(os.path.join(args.out, "manifest.json"), doc)
    if not args.quiet:
        w = csv.writer(sys.stdout, lineterminator="\n")
        keys = ["setting", "method", "alpha", "rejection_rate" if spec["study"] == "power" else "cdf"]
        w.writerow(keys)
        for row in aggregate:
            w.writerow([simulation._fmt(row[k]) for k in keys])
    return EXIT_OK


def _calibration_setting(args, target: float) -> simulation.SimSetting:
    try:
        return simulation.SimSetting(
            design=args.design,
            error=args.error,
            n=args.n,
            p=args.p,
            target_power=target,
            calibration_reps=args.reps,
            seed0=args.seed,
            alpha=args.alpha,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_calibrate(args) -> int:
    if args.reps < 1000:
        raise InputError("--reps must be at least 1000")
    rows = []
    for target in args.target:
        s = _calibration_setting(args, target)
        beta = simulation.calibrate_beta(s)
        row = {"target_power": target, "beta": beta}
        if args.verify_reps:
            curve = simulation.f_power_curve(s, args.verify_reps, args.verify_seed)
            row["verified_power"] = curve.power(beta)
            row["verify_reps"] = args.verify_reps
            row["verify_seed"] = args.verify_seed
        rows.append(row)
    doc = {
        "command": "calibrate",
        "version": __version__,
        "results": rows,
        "config": {
            "design": args.design,
            "error": args.error,
            "n": args.n,
            "p": args.p,
            "alpha": args.alpha,
            "reps": args.reps,
            "seed": args.seed,
        },
    }
    _emit(doc, "json", args.output)
    return EXIT_OK


def cmd_check(args) -> int:
    results = theory_checks.run_checks(args.seed, args.instances, args.lemma_instances)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.detail})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _positive_int(v: str) -> int:
    try:
        i = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {v!r}") from None
    if i < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1: {v}")
    return i


def _nonneg_int(v: str) -> int:
    try:
        i = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {v!r}") from None
    if i < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative: {v}")
    return i


def _fraction(v: str) -> float:
    try:
        f = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {v!r}") from None
    if not 0.0 < f < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1): {v}")
    return f


def _positive_float(v: str) -> float:
    try:
        f = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {v!r}") from None
    if not f > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {v}")
    return f


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-palmrt",
        description="Permutation-augmented robust regression tests.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_method: bool = True):
        p.add_argument("--input", "-i", required=True, help="CSV with y, x* and z* columns")
        p.add_argument("--no-intercept", action="store_true", help="do not add an intercept to the controls")
        p.add_argument("-B", type=_positive_int, default=999, help="number of permutations (default 999)")
        p.add_argument("--seed", type=_nonneg_int, default=0)
        p.add_argument("--output", "-o", default=None, help="output file (default stdout)")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        if with_method:
            p.add_argument("--fitter", choices=("OLS", "HuberMAD-prelim"), default="HuberMAD-prelim")
            p.add_argument("--evaluator", choices=[e for e in EVALUATORS if e != "IQRLogRatio"], default="HuberScaled")
            p.add_argument("--delta", type=_positive_float, default=1.345, help="Huber tuning constant")
            p.add_argument("--rel-tol", type=_positive_float, default=1e-8, help="IRLS stopping tolerance")
            p.add_argument("--max-iter", type=_positive_int, default=200, help="IRLS iteration cap")

    p = sub.add_parser("test", help="test H0: beta = 0", allow_abbrev=False)
    common(p)
    p.add_argument("--ties", choices=("conservative", "half"), default="conservative")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("dispersion", help="test for a difference in inter-quantile spread", allow_abbrev=False)
    common(p, with_method=False)
    p.add_argument("--q-low", type=_fraction, default=0.10)
    p.add_argument("--q-high", type=_fraction, default=0.90)
    p.add_argument("--ties", choices=("conservative", "half"), default="conservative")
    p.set_defaults(func=cmd_dispersion)

    p = sub.add_parser("ci", help="confidence interval for beta by test inversion", allow_abbrev=False)
    common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--grid", help="LO:HI:NUM evenly spaced beta values")
    p.add_argument("--grid-values", help="comma-separated beta values")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("simulate", help="run a power or null study from a JSON manifest", allow_abbrev=False)
    p.add_argument("--manifest", "-m", required=True)
    p.add_argument("--out", required=True, help="output directory for trials.csv, aggregate.csv, manifest.json")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="find beta giving a target F-test power", allow_abbrev=False)
    p.add_argument("--design", choices=simulation.DESIGNS, default="Normal")
    p.add_argument("--error", choices=simulation.ERRORS, default="Normal")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--p", type=_positive_int, default=6)
    p.add_argument("--alpha", type=_fraction, default=0.05)
    p.add_argument("--target", type=_fraction, nargs="+", required=True)
    p.add_argument("--reps", type=_positive_int, default=5000)
    p.add_argument("--seed", type=_nonneg_int, default=1)
    p.add_argument("--verify-reps", type=_nonneg_int, default=0, help="fresh-seed verification run size")
    p.add_argument("--verify-seed", type=_nonneg_int, default=987654321)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("check", help="run the property suites", allow_abbrev=False)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--instances", type=_positive_int, default=100)
    p.add_argument("--lemma-instances", type=_positive_int, default=10_000)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, np.linalg.LinAlgError, simulation.CalibrationError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
