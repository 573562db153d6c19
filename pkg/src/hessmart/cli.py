"""Command-line entry point: ``hessmart {order,calibrate,simulate,price}``.

Exit codes: 0 success, 1 usage / input / solver failure, 2 not in convex
order, 3 boundary (order holds only non-strictly), 4 arbitrage suspected.
File formats are described in ``docs/formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import jsonschema
import numpy as np

from .calibration import (
    CalibrationConfig,
    CalibrationState,
    MaturitySpec,
    calibrate,
    lognormal_reference,
    product_reference,
)
from .errors import ArbitrageSuspected, ConvergenceError, HessmartError
from .measures import DiscreteMeasure
from .payoffs import PayoffCombination, payoff_from_json
from .potential import LegendreConfig
from .simulate import DEFAULT_SUBSTEPS, ParticleCloud, price, simulate_paths
from .strassen import KernelConfig, check_convex_order

log = logging.getLogger("hessmart")

EXIT_OK, EXIT_USAGE, EXIT_NOT_ORDERED, EXIT_BOUNDARY, EXIT_ARBITRAGE = 0, 1, 2, 3, 4


# -- schemas -------------------------------------------------------------------

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

MEASURE_SCHEMA = {
    "type": "object",
    "properties": {
        "dimension": {"type": "integer", "minimum": 0},
        "atoms": {"type": "array", "items": {"type": "array", "items": _NUM}, "minItems": 1},
        "weights": {"type": "array", "items": _NUM, "minItems": 1},
    },
    "required": ["dimension", "atoms", "weights"],
    "additionalProperties": False,
}

PAYOFF_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"kind": {"const": "affine"}, "a": _NUM, "b": _VEC},
            "required": ["kind", "b"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"kind": {"const": "call"}, "weights": _VEC, "strike": _NUM},
            "required": ["kind", "weights", "strike"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "cross"},
                "i": {"type": "integer", "minimum": 0},
                "j": {"type": "integer", "minimum": 0},
                "strike": _NUM,
            },
            "required": ["kind", "i", "j", "strike"],
            "additionalProperties": False,
        },
    ]
}

COMBINATION_SCHEMA = {
    "type": "object",
    "properties": {
        "basis": {"type": "array", "items": PAYOFF_SCHEMA},
        "coefficients": {"type": "array", "items": _NUM},
    },
    "required": ["basis", "coefficients"],
    "additionalProperties": False,
}

REFERENCE_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"nodes": MEASURE_SCHEMA},
            "required": ["nodes"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "lognormal": {
                    "type": "object",
                    "properties": {
                        "forward": _VEC,
                        "variance": _VEC,
                        "nodes": {"type": "integer", "minimum": 2},
                    },
                    "required": ["forward", "variance"],
                    "additionalProperties": False,
                }
            },
            "required": ["lognormal"],
            "additionalProperties": False,
        },
    ]
}

CALIBRATION_SCHEMA = {
    "type": "object",
    "properties": {
        "x_star": _VEC,
        "mu0": MEASURE_SCHEMA,
        "maturities": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "time": {"type": "number", "exclusiveMinimum": 0},
                    "reference": REFERENCE_SCHEMA,
                    "basis": {"type": "array", "items": PAYOFF_SCHEMA},
                    "targets": {"type": "array", "items": _NUM},
                    "domain": {"type": "array", "items": {"type": "array"}, "minItems": 2, "maxItems": 2},
                },
                "required": ["time", "reference", "basis", "targets"],
                "additionalProperties": False,
            },
        },
        "tolerances": {
            "type": "object",
            "properties": {
                "price_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 0},
                "legendre_tol": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "required": ["maturities"],
    "oneOf": [{"required": ["x_star"]}, {"required": ["mu0"]}],
    "additionalProperties": False,
}

_SCHEMAS = {
    "measure": MEASURE_SCHEMA,
    "payoff": {"oneOf": [PAYOFF_SCHEMA, COMBINATION_SCHEMA]},
    "calibration": CALIBRATION_SCHEMA,
}


class UsageError(Exception):
    pass


# -- serialization -----------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isfinite(x):
            return format(x, ".17g")
        return "null"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _fmt(obj) + "\n"


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _load(path, schema_name):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(data, _SCHEMAS[schema_name])
    except jsonschema.ValidationError as exc:
        raise UsageError(f"{path}: schema violation: {exc.message}") from exc
    return data


def _measure(data):
    try:
        return DiscreteMeasure.from_json(data)
    except ValueError as exc:
        raise UsageError(f"invalid measure: {exc}") from exc


# -- commands -----------------------------------------------------------------------


def cmd_order(args) -> int:
    m1 = _measure(_load(args.m1, "measure"))
    m2 = _measure(_load(args.m2, "measure"))
    cfg = KernelConfig(tol=args.tol)
    v = check_convex_order(m1, m2, cfg)
    report = {
        "ordered": v.ordered,
        "boundary": v.boundary,
        "gap": v.gap,
        "reason": v.reason,
        "witness": v.witness.to_json() if (v.witness is not None and not v.ordered) else None,
    }
    if v.solution is not None:
        s = v.solution
        report.update(
            status=s.status.value,
            iterations=s.iterations,
            residual_mass=s.residual_mass,
            residual_moment=s.residual_moment,
            multipliers=s.multipliers if s.converged else None,
        )
    _write(dumps(report), args.out)
    if not v.ordered:
        return EXIT_NOT_ORDERED
    return EXIT_BOUNDARY if v.boundary else EXIT_OK


def _reference(ref):
    if "nodes" in ref:
        return _measure(ref["nodes"])
    ln = ref["lognormal"]
    fwd, var = ln["forward"], ln["variance"]
    if len(fwd) != len(var):
        raise UsageError("lognormal forward and variance lengths differ")
    if len(fwd) == 1:
        return lognormal_reference(fwd[0], var[0], ln.get("nodes", 256))
    return product_reference(fwd, var, ln.get("nodes", 64))


def load_calibration_config(data):
    specs = []
    for m in data["maturities"]:
        dom = m.get("domain")
        if dom is not None:
            dom = (np.asarray(dom[0], dtype=float), np.asarray(dom[1], dtype=float))
        try:
            specs.append(MaturitySpec(
                float(m["time"]), _reference(m["reference"]),
                [payoff_from_json(b) for b in m["basis"]], m["targets"], dom,
            ))
        except ValueError as exc:
            raise UsageError(f"maturity {m['time']}: {exc}") from exc
    mu0 = _measure(data["mu0"]) if "mu0" in data else DiscreteMeasure.dirac(data["x_star"])
    tol = data.get("tolerances", {})
    cfg = CalibrationConfig(
        price_tol=tol.get("price_tol", 1e-6),
        max_iter=tol.get("max_iter", 500),
        legendre=LegendreConfig(tol=tol.get("legendre_tol", 1e-10)),
    )
    return specs, mu0, cfg


def cmd_calibrate(args) -> int:
    data = _load(args.config, "calibration")
    specs, mu0, cfg = load_calibration_config(data)
    if args.tol is not None:
        cfg = CalibrationConfig(price_tol=args.tol, max_iter=cfg.max_iter, legendre=cfg.legendre)
    try:
        state = calibrate(specs, mu0, cfg)
    except ArbitrageSuspected as exc:
        report = {
            "status": "arbitrage_suspected",
            "message": str(exc),
            "direction": [np.asarray(d) for d in (exc.direction or [])],
            "slope": exc.slope,
            "envelopes": exc.envelopes,
        }
        _write(dumps(report), args.out)
        return EXIT_ARBITRAGE
    except ConvergenceError as exc:
        report = {"status": "not_converged", "message": str(exc),
                  "max_residual": exc.residual, "iterations": exc.iterations}
        _write(dumps(report), args.out)
        return EXIT_USAGE
    out = state.to_json()
    out["status"] = "converged"
    _write(dumps(out), args.out)
    return EXIT_OK


def _parse_times(s):
    if s is None:
        return None
    try:
        return [float(t) for t in s.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --times value {s!r}") from exc


def cmd_simulate(args) -> int:
    try:
        with open(args.calib) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read calibration output {args.calib}: {exc}") from exc
    if data.get("status") != "converged":
        raise UsageError("calibration output is not a converged model")
    data = {k: v for k, v in data.items() if k != "status"}
    state = CalibrationState.from_json(data)
    log_axes = None
    if args.log_axes:
        log_axes = [int(a) for a in args.log_axes.split(",")]
        mask = np.zeros(state.mu0.dim, dtype=bool)
        mask[log_axes] = True
        log_axes = mask
    times, paths = simulate_paths(
        state, args.paths, seed=args.seed, times=_parse_times(args.times), substeps=args.substeps,
        log_axes=log_axes, threads=args.threads, scheme=args.scheme,
    )
    if args.terminal:
        times, paths = times[-1:], paths[-1:]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = paths.shape[2]
    w.writerow(["path", "time"] + [f"x{i}" for i in range(n)])
    for p in range(paths.shape[1]):
        for ti, t in enumerate(times):
            w.writerow([p, format(float(t), ".17g")] + [format(float(v), ".17g") for v in paths[ti, p]])
    _write(buf.getvalue(), args.out)
    return EXIT_OK


def read_cloud(path, time=None):
    """Positions from a simulate CSV, at ``time`` (default: the last time present)."""
    try:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read cloud {path}: {exc}") from exc
    times = rows[:, 1]
    t = times.max() if time is None else time
    sel = np.isclose(times, t, rtol=0, atol=1e-12)
    if not np.any(sel):
        raise UsageError(f"no particles at time {t} in {path}")
    return ParticleCloud(rows[sel, 2:], float(t))


def cmd_price(args) -> int:
    data = _load(args.payoff, "payoff")
    h = PayoffCombination.from_json(data) if "basis" in data else payoff_from_json(data)
    cloud = read_cloud(args.cloud, args.time)
    est, se = price(cloud, h)
    _write(dumps({"estimate": est, "stderr": se, "particles": cloud.size, "time": cloud.time}), args.out)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hessmart", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("order", help="decide convex order between two measures")
    o.add_argument("--m1", required=True)
    o.add_argument("--m2", required=True)
    o.add_argument("--tol", type=float, default=1e-9)
    o.add_argument("--out", default="-")
    o.set_defaults(func=cmd_order)

    c = sub.add_parser("calibrate", help="calibrate to European prices")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default="-")
    c.add_argument("--tol", type=float, default=None, help="price tolerance override")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="Monte Carlo paths of a calibrated model")
    s.add_argument("--calib", "--config", dest="calib", required=True)
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--times", default=None, help="comma-separated output dates")
    s.add_argument("--substeps", type=int, default=DEFAULT_SUBSTEPS)
    s.add_argument("--scheme", choices=["diffusion", "kernel"], default="diffusion")
    s.add_argument("--log-axes", default=None, help="comma-separated 0-based axes stepped in log space")
    s.add_argument("--terminal", action="store_true", help="write only the last date")
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("price", help="Monte Carlo price over a saved cloud")
    q.add_argument("--payoff", "--config", dest="payoff", required=True)
    q.add_argument("--cloud", required=True)
    q.add_argument("--time", type=float, default=None)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_price)
    return p


def _setup_logging():
    level = os.environ.get("HESSMART_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hessmart: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HessmartError, ValueError) as exc:
        print(f"hessmart: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
