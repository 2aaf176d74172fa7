"""Runnable experiments.  Each runner takes a resolved config dict and returns a :class:`RunReport`."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .. import checks, memo
from ..quadrature import Grid
from . import brachistochrone, nonlocal_kernel, semilocal


@dataclass
class Table:
    """A CSV-ready table."""

    name: str
    header: tuple
    rows: List[tuple]


@dataclass
class RunReport:
    experiment: str
    config: dict
    steps: List[tuple] = field(default_factory=list)  # (step, loss, grad_norm)
    tables: List[Table] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_time: float = 0.0
    passed: bool = True
    graph_roots: list = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [s[1] for s in self.steps]

    @property
    def grad_norms(self) -> List[float]:
        return [s[2] for s in self.steps]


def _grid(cfg: dict) -> Optional[Grid]:
    g = cfg.get("grid")
    return Grid.from_config(g) if g else None


def run_brachistochrone(cfg: dict) -> RunReport:
    opt, model = cfg["optimizer"], cfg["model"]
    res = brachistochrone.run(cfg["estimator"], hidden=tuple(model["hidden"]), steps=opt["steps"],
                              step_size=opt["step_size"], grid=_grid(cfg), seed=cfg["seed"],
                              first_scale=model["first_scale"], sag=model["sag"])
    rep = RunReport("brachistochrone", cfg, steps=res.steps, graph_roots=res.graph_roots)
    rep.tables.append(Table("curve", ("x", "y"), res.curve))
    rep.summary = dict(res.extra)
    return rep


def run_nonlocal(cfg: dict) -> RunReport:
    opt, nl = cfg["optimizer"], cfg["nonlocal"]
    res = nonlocal_kernel.run(opt["steps"], opt["step_size"], grid=_grid(cfg),
                              sample_points=nl["sample_points"], node_budget=nl["node_budget"])
    rep = RunReport("nonlocal", cfg, steps=res.steps, graph_roots=res.graph_roots)
    rep.tables.append(Table("kernel", ("step", "x", "y", "k"), res.kernel))
    rep.summary = dict(res.extra)
    return rep


def run_semilocal_demo(cfg: dict) -> RunReport:
    sl = cfg["semilocal"]
    density = semilocal.GaussianDensity(sl["amplitude"], sl["width"], sl["floor"])
    res = semilocal.run(sl["eps"], density, grid=_grid(cfg))
    rep = RunReport("semilocal_demo", cfg, graph_roots=res.graph_roots)
    rep.tables.append(Table("potential", ("x", "rho", "v", "oracle"), res.rows))
    rep.summary = {"energy": res.energy, "max_deviation": res.max_deviation,
                   "tolerance": sl["tolerance"]}
    rep.passed = res.max_deviation <= sl["tolerance"]
    return rep


def run_adjoint_check(cfg: dict) -> RunReport:
    a = cfg["adjoint"]
    results = checks.adjoint_suite(seed=cfg["seed"], n=a["n"], a=a["a"], b=a["b"], tolerance=a["tolerance"])
    rep = RunReport("adjoint_check", cfg)
    rep.tables.append(Table("adjoint", ("primitive", "lhs", "rhs", "relative_error", "tolerance", "passed"),
                            [(r.name, r.lhs, r.rhs, r.error, r.tolerance, int(r.passed)) for r in results]))
    rep.summary = {"max_relative_error": {r.name: r.error for r in results},
                   "failed": [r.name for r in results if not r.passed]}
    rep.passed = all(r.passed for r in results)
    return rep


def run_cse_bench(cfg: dict) -> RunReport:
    c = cfg["cse"]
    rows = memo.depth_benchmark(c["depth_max"], repeats=c["repeats"])
    rep = RunReport("cse_bench", cfg, graph_roots=[memo.nested_family(c["depth_max"])[0]])
    rep.tables.append(Table("cse", memo.CSV_HEADER, [(d, nc, nn, f"{tc:.6e}", f"{tn:.6e}") for d, nc, nn, tc, tn in rows]))
    rep.summary = {"seconds_cached": [r[3] for r in rows], "seconds_naive": [r[4] for r in rows]}
    rep.passed = all(cached <= 2 * d + 1 and naive == 2 ** d for d, cached, naive, _, _ in rows)
    return rep


RUNNERS: Dict[str, Callable[[dict], RunReport]] = {
    "brachistochrone": run_brachistochrone,
    "nonlocal": run_nonlocal,
    "semilocal_demo": run_semilocal_demo,
    "adjoint_check": run_adjoint_check,
    "cse_bench": run_cse_bench,
}


def run_experiment(cfg: dict) -> RunReport:
    t0 = time.perf_counter()
    rep = RUNNERS[cfg["experiment"]](cfg)
    rep.wall_time = time.perf_counter() - t0
    return rep
