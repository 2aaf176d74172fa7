"""Numerical verification suites for the operator rules.

``adjoint_suite`` checks ``<O u, v> = <u, O* v>`` for each primitive with
quadrature inner products and rapidly decaying test functions.
``jvp_suite`` compares operator-level tangents with central differences.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import engine as E
from . import operators as ops
from .autodiff import op_jvp, op_transpose
from .quadrature import Grid, inner_product, make_gauss_legendre


@dataclass
class CheckResult:
    name: str
    lhs: float
    rhs: float
    error: float
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# random smooth test functions
# ---------------------------------------------------------------------------

def random_windowed(rng: np.random.Generator, nargs: int = 1, width: float = 1.0) -> ops.FunctionValue:
    """``p(x) exp(-|x|^2 / (2 width^2))`` with a random quadratic-plus-sine ``p``."""
    c = rng.normal(size=(nargs, 4))
    c0 = rng.normal()

    def build(*xs):
        total = E.const(c0)
        decay = E.const(0.0)
        for i, x in enumerate(xs):
            total = total + c[i, 0] * x + c[i, 1] * x * x + c[i, 2] * E.sin(c[i, 3] * x + 0.3)
            decay = decay + x * x
        return total * E.exp(decay * (-0.5 / width ** 2))

    return ops.function(build, ops.FunctionSignature(((),), ((),) * nargs))


def random_smooth(rng: np.random.Generator, nargs: int = 1) -> ops.FunctionValue:
    """A bounded smooth function: random sines times a broad Gaussian."""
    a = rng.normal(size=(nargs, 3))

    def build(*xs):
        total = E.const(rng.normal())
        decay = E.const(0.0)
        for i, x in enumerate(xs):
            total = total + a[i, 0] * E.sin(a[i, 1] * x + a[i, 2]) + 0.3 * a[i, 2] * x
            decay = decay + x * x
        return total * E.exp(decay * -0.1)

    return ops.function(build, ops.FunctionSignature(((),), ((),) * nargs))


def _rel(lhs: float, rhs: float) -> float:
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale


# ---------------------------------------------------------------------------
# adjoint identities
# ---------------------------------------------------------------------------

def adjoint_suite(seed: int = 0, n: int = 400, a: float = -6.0, b: float = 6.0,
                  tolerance: float = 1e-5) -> List[CheckResult]:
    """One result per primitive; ``error`` is the relative mismatch of the two pairings."""
    rng = np.random.default_rng(seed)
    g = make_gauss_legendre(a, b, n)
    results = []

    def record(name, lhs, rhs):
        err = _rel(lhs, rhs)
        results.append(CheckResult(name, lhs, rhs, err, tolerance, bool(err <= tolerance)))

    u, v = random_windowed(rng), random_windowed(rng)
    ct = op_transpose(lambda f: ops.nabla(f), [u], v)
    record("nabla", inner_product(ops.nabla(u), v, g), inner_product(u, ct, g))

    u, v2 = random_windowed(rng), random_windowed(rng, 2)
    ct = op_transpose(lambda f: ops.linearize(f), [u], v2, grids=g)
    record("linearize", inner_product(ops.linearize(u), v2, [g, g]), inner_product(u, ct, g))

    u2, v = random_windowed(rng, 2), random_windowed(rng)
    ct = op_transpose(lambda f: ops.integrate(f, g, argnum=0), [u2], v)
    record("integrate", inner_product(ops.integrate(u2, g, argnum=0), v, g), inner_product(u2, ct, [g, g]))

    u, v = random_windowed(rng), random_windowed(rng)
    ident = ops.identity()
    ct = op_transpose(lambda f: ops.compose(f, [ident]), [u], v)
    record("compose_outer", inner_product(ops.compose(u, [ident]), v, g), inner_product(u, ct, g))

    u, v = random_windowed(rng), random_windowed(rng)
    phi = ops.function(lambda x, w: (E.sin(x) + 0.5 * E.cos(2.0 * x)) * w, "F[f[],f[],f[]]")
    prog = lambda f: ops.compose(phi, [ident, f])
    ct = op_transpose(prog, [u], v)
    record("compose_inner", inner_product(prog(u), v, g), inner_product(u, ct, g))

    u2, v2 = random_windowed(rng, 2), random_windowed(rng, 2)
    ct = op_transpose(lambda f: ops.permute_args(f, (1, 0)), [u2], v2)
    record("permute_args", inner_product(ops.permute_args(u2, (1, 0)), v2, [g, g]), inner_product(u2, ct, [g, g]))

    u, w = random_windowed(rng), random_windowed(rng)
    h = ops.pack([random_windowed(rng, 2), random_windowed(rng, 2)])
    cu, cw = op_transpose(lambda p, q: ops.zip_functions(p, q), [u, w], h, grids=g)
    record("zip", inner_product(ops.zip_functions(u, w), h, [g, g]),
           inner_product(u, cu, g) + inner_product(w, cw, g))

    u, v2 = random_windowed(rng), random_windowed(rng, 2)
    ct = op_transpose(lambda f: ops.broadcast_fn(f, [()], [0]), [u], v2, grids=g)
    record("broadcast", inner_product(ops.broadcast_fn(u, [()], [0]), v2, [g, g]), inner_product(u, ct, g))
    return results


# ---------------------------------------------------------------------------
# tangents against central differences
# ---------------------------------------------------------------------------

@dataclass
class JvpCase:
    name: str
    program: Callable
    make_inputs: Callable  # rng -> list of function values
    n_probe_args: int      # arguments of the program's output


def _jvp_cases(grid: Grid) -> List[JvpCase]:
    ident = ops.identity()
    soft = ops.function(lambda w: E.tanh(w) + w * w * w / 3.0, "F[f[],f[]]")
    phi = ops.function(lambda x, w, dw: E.sin(x) * w * w + E.sqrt(1.0 + dw * dw), "F[f[],f[],f[],f[]]")
    one = lambda rng: [random_smooth(rng)]
    two = lambda rng: [random_smooth(rng, 2)]
    lin = lambda rng: [ops.function(lambda x, w, c=rng.normal(size=2): (c[0] + E.sin(c[1] * x)) * w,
                                    "F[f[],f[],f[]]")]
    return [
        JvpCase("compose_outer", lambda f: ops.compose(f, [ops.function(E.sin, "F[f[],f[]]")]), one, 1),
        JvpCase("compose_inner", lambda f: ops.compose(soft, [f]), one, 1),
        JvpCase("compose_both", lambda f, g: ops.compose(f, [g]), lambda rng: one(rng) + one(rng), 1),
        JvpCase("nabla", lambda f: ops.nabla(f), one, 1),
        JvpCase("linearize", lambda f: ops.linearize(f), one, 2),
        JvpCase("linear_transpose", lambda f: ops.linear_transpose(f, 1), lin, 2),
        JvpCase("integrate", lambda f: ops.integrate(f, grid, argnum=1), two, 1),
        JvpCase("permute_args", lambda f: ops.permute_args(f, (1, 0)), two, 2),
        JvpCase("zip", lambda f, g: ops.zip_functions(f, g), lambda rng: one(rng) + one(rng), 2),
        JvpCase("broadcast", lambda f: ops.broadcast_fn(f, [()], [0]), one, 2),
        JvpCase("functional", lambda f: ops.integrate(ops.compose(phi, [ident, f, ops.nabla(f)]), grid), one, 0),
    ]


def _values(f: ops.FunctionValue, args) -> np.ndarray:
    out = f(*args)
    if isinstance(out, tuple):
        return np.stack([np.asarray(o) for o in out])
    return np.asarray(out)


def jvp_suite(seed: int = 0, pairs: int = 10, probes: int = 50, eps: float = 1e-5,
              tolerance: float = 1e-3) -> List[CheckResult]:
    """Max-norm gap between tangents and central differences, per primitive."""
    rng = np.random.default_rng(seed)
    grid = make_gauss_legendre(-3.0, 3.0, 32)
    results = []
    for case in _jvp_cases(grid):
        worst, scale = 0.0, 0.0
        for _ in range(pairs):
            primals = case.make_inputs(rng)
            tangents = case.make_inputs(rng)
            args = [rng.uniform(-2.0, 2.0, size=probes) for _ in range(case.n_probe_args)]
            jt = op_jvp(case.program, primals, tangents)
            got = _values(jt.tangent, args)
            plus = case.program(*[p + eps * t for p, t in zip(primals, tangents)])
            minus = case.program(*[p - eps * t for p, t in zip(primals, tangents)])
            fd = (_values(plus, args) - _values(minus, args)) / (2 * eps)
            worst = max(worst, float(np.max(np.abs(got - fd))))
            scale = max(scale, float(np.max(np.abs(fd))))
        results.append(CheckResult(case.name, scale, worst, worst, tolerance, bool(worst <= tolerance)))
    return results


def run_suite(fn: Callable, **kw):
    t0 = time.perf_counter()
    res = fn(**kw)
    return res, time.perf_counter() - t0


def summary_lines(results: Sequence[CheckResult]) -> List[str]:
    return [f"{'PASS' if r.passed else 'FAIL'} {r.name}: error {r.error:.3e} (tolerance {r.tolerance:g})"
            for r in results]
