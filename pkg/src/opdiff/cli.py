"""``opdiff run <experiment> --config <path> --out <dir> [--seed N] [--dump-graph]``.

Writes ``loss.csv`` (step, loss, grad_norm) for experiments that iterate,
one CSV per result table (``curve.csv``, ``kernel.csv``, ...), ``report.json``
and, with ``--dump-graph``, ``graph.json``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import jsonschema

from . import __version__
from . import engine as E
from . import operators as ops
from .errors import ConfigError, OpdiffError
from .experiments import RUNNERS, RunReport, run_experiment

EXPERIMENTS = tuple(RUNNERS)

_GRID = {
    "type": "object",
    "oneOf": [
        {"required": ["kind", "a", "b", "n"]},
        {"required": ["points", "weights"]},
    ],
    "properties": {
        "kind": {"enum": ["uniform", "gauss_legendre"]},
        "a": {"type": "number"},
        "b": {"type": "number"},
        "n": {"type": "integer", "minimum": 1},
        "points": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "grid": _GRID,
        "estimator": {"enum": ["minimize_F", "minimize_F_via_FD", "minimize_FD"]},
        "optimizer": {
            "type": "object",
            "properties": {
                "name": {"enum": ["gd"]},
                "step_size": {"type": "number", "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "first_scale": {"type": "number", "exclusiveMinimum": 0},
                "sag": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "nonlocal": {
            "type": "object",
            "properties": {
                "sample_points": {"type": "integer", "minimum": 1},
                "node_budget": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "semilocal": {
            "type": "object",
            "properties": {
                "eps": {"oneOf": [
                    {"enum": ["density", "gradient_ratio", "dirac_exchange"]},
                    {"type": "array", "minItems": 1,
                     "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}},
                ]},
                "amplitude": {"type": "number", "minimum": 0},
                "width": {"type": "number", "exclusiveMinimum": 0},
                "floor": {"type": "number"},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "adjoint": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "a": {"type": "number"},
                "b": {"type": "number"},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "cse": {
            "type": "object",
            "properties": {
                "depth_max": {"type": "integer", "minimum": 1},
                "repeats": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "brachistochrone": {
        "grid": {"kind": "uniform", "a": 0.01, "b": 1.0, "n": 50},
        "estimator": "minimize_FD",
        "optimizer": {"name": "gd", "step_size": 1e-2, "steps": 2000},
        "model": {"hidden": [16, 16, 1], "first_scale": 15.0, "sag": -0.5},
    },
    "nonlocal": {
        "grid": {"kind": "gauss_legendre", "a": 0.0, "b": 1.0, "n": 24},
        "optimizer": {"name": "gd", "step_size": 0.1, "steps": 4},
        "nonlocal": {"sample_points": 11, "node_budget": 200000},
    },
    "semilocal_demo": {
        "grid": {"kind": "gauss_legendre", "a": -4.0, "b": 4.0, "n": 64},
        "semilocal": {"eps": "gradient_ratio", "amplitude": 1.0, "width": 1.0, "floor": 0.1, "tolerance": 1e-4},
    },
    "adjoint_check": {
        "adjoint": {"n": 400, "a": -6.0, "b": 6.0, "tolerance": 1e-5},
    },
    "cse_bench": {
        "cse": {"depth_max": 12, "repeats": 3},
    },
}

# sections each experiment understands
SECTIONS = {
    "brachistochrone": {"grid", "estimator", "optimizer", "model"},
    "nonlocal": {"grid", "optimizer", "nonlocal"},
    "semilocal_demo": {"grid", "semilocal"},
    "adjoint_check": {"adjoint"},
    "cse_bench": {"cse"},
}


def resolve_config(experiment: str, user: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    """Validate ``user`` and merge it over the experiment's defaults."""
    user = dict(user or {})
    if experiment not in DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose one of {', '.join(EXPERIMENTS)}")
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from None
    if user.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {user['experiment']!r} but {experiment!r} was requested")
    extra = set(user) - SECTIONS[experiment] - {"experiment", "seed", "output_dir"}
    if extra:
        raise ConfigError(f"{experiment} does not take {', '.join(sorted(extra))}")
    cfg = copy.deepcopy(DEFAULTS[experiment])
    for key, val in user.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict) and key != "grid":
            cfg[key].update(val)
        else:
            cfg[key] = val
    cfg["experiment"] = experiment
    cfg["seed"] = int(seed if seed is not None else user.get("seed", 0))
    if "grid" in cfg:
        g = cfg["grid"]
        if "points" in g and len(g["points"]) != len(g["weights"]):
            raise ConfigError("grid points and weights differ in length")
        if "a" in g and not g["a"] < g["b"]:
            raise ConfigError(f"grid needs a < b, got [{g['a']}, {g['b']}]")
    if experiment == "brachistochrone" and cfg["model"]["hidden"][-1] != 1:
        raise ConfigError("the last hidden size must be 1")
    if experiment == "adjoint_check" and not cfg["adjoint"]["a"] < cfg["adjoint"]["b"]:
        raise ConfigError("adjoint range needs a < b")
    return cfg


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if hasattr(x, "tolist"):
        return _jsonable(x.tolist())
    return x


def write_outputs(rep: RunReport, out: Path, dump_graph: bool = False) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if rep.steps:
        write_csv(out / "loss.csv", ("step", "loss", "grad_norm"), rep.steps)
        written.append(out / "loss.csv")
    for t in rep.tables:
        write_csv(out / f"{t.name}.csv", t.header, t.rows)
        written.append(out / f"{t.name}.csv")
    report = {
        "version": __version__,
        "experiment": rep.experiment,
        "config": rep.config,
        "passed": rep.passed,
        "wall_time_seconds": rep.wall_time,
        "steps": len(rep.steps),
        "losses": rep.losses,
        "grad_norms": rep.grad_norms,
        "summary": rep.summary,
    }
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2) + "\n")
    written.append(out / "report.json")
    if dump_graph:
        (out / "graph.json").write_text(ops.dump_graph(rep.graph_roots) + "\n")
        written.append(out / "graph.json")
    return written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opdiff", description="Run operator-differentiation experiments.")
    p.add_argument("--version", action="version", version=f"opdiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("--config", type=Path, help="JSON config file; missing fields take defaults")
    r.add_argument("--out", type=Path, help="output directory (default: config output_dir or ./runs/<experiment>)")
    r.add_argument("--seed", type=int)
    r.add_argument("--dump-graph", action="store_true", help="also write graph.json")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        user = {}
        if args.config is not None:
            try:
                user = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError("config must be a JSON object")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = resolve_config(args.experiment, user, args.seed)
        out = args.out or Path(user.get("output_dir", Path("runs") / args.experiment))
        # invalid values become NaN during runs; experiments check their own preconditions
        previous = E.set_strict(False)
        try:
            rep = run_experiment(cfg)
        finally:
            E.set_strict(previous)
        write_outputs(rep, Path(out), args.dump_graph)
    except ConfigError as exc:
        print(f"opdiff: {exc}", file=sys.stderr)
        return 2
    except OpdiffError as exc:
        print(f"opdiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    status = "ok" if rep.passed else "FAILED"
    print(f"{args.experiment}: {status} in {rep.wall_time:.2f} s -> {out}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
