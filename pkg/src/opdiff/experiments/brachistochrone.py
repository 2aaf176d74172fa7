"""Shortest-descent-time curve fitted by a small network.

The curve is ``y(x) = net(x) sin(pi x) - x`` so it always passes through
``(0, 0)`` and ``(1, -1)``.  The travel time functional is

    T(y) = integral sqrt(1 + y'(x)^2) / sqrt(-y(x)) dx

and three gradient estimators for the network weights are provided:

* ``minimize_F``: differentiate the quadrature sum of the integrand.
* ``minimize_F_via_FD``: pair the functional derivative with ``dy/dtheta``.
* ``minimize_FD``: drive ``integral (dT/dy)^2`` to zero.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.optimize import brentq

from .. import engine as E
from .. import operators as ops
from ..autodiff import functional_grad
from ..errors import ConfigError, SingularIntegrand
from ..quadrature import Grid, make_uniform

ESTIMATORS = ("minimize_F", "minimize_F_via_FD", "minimize_FD")


# ---------------------------------------------------------------------------
# network ansatz
# ---------------------------------------------------------------------------

def mlp_expr(x: E.Expr, hidden: Sequence[int]) -> E.Expr:
    """Dense network on a scalar input with sigmoid hidden layers and a linear output.

    ``hidden`` lists every layer width including the final ``1``.  Weights are
    parameters named ``W0, b0, W1, b1, ...``.
    """
    hidden = list(hidden)
    if not hidden or hidden[-1] != 1 or any(h < 1 for h in hidden):
        raise ConfigError(f"hidden sizes must be positive and end with 1, got {hidden}")
    h = None
    width = 1
    for k, out in enumerate(hidden):
        last = k == len(hidden) - 1
        w_shape = (out,) if k == 0 else (out, width)
        W = E.param(f"W{k}", w_shape)
        b = E.param(f"b{k}", (out,))
        z = (W * x if k == 0 else W @ h) + b
        h = z if last else E.sigmoid(z)
        width = out
    return E.index(h, 0)


def init_params(hidden: Sequence[int], seed: int = 0, first_scale: float = 15.0,
                sag: float = -0.5) -> Dict[str, np.ndarray]:
    """Initial weights for :func:`mlp_expr`.

    First-layer units get slopes of magnitude about ``first_scale`` with their
    transitions spread uniformly over ``[0, 1]``; inner layers are normal with
    ``1/sqrt(fan_in)`` scaling.  The output weights start at zero and the
    output bias at ``sag``, so the initial curve is ``sag sin(pi x) - x``
    whatever the seed.
    """
    rng = np.random.default_rng(seed)
    params = {}
    width = 1
    last = len(hidden) - 1
    for k, out in enumerate(hidden):
        if k == 0:
            W = first_scale * rng.choice([-1.0, 1.0], size=out) * rng.uniform(0.5, 1.5, size=out)
            b = -W * rng.uniform(0.0, 1.0, size=out)
        elif k == last:
            W, b = np.zeros((out, width)), np.full(out, float(sag))
        else:
            W, b = rng.normal(size=(out, width)) / math.sqrt(width), np.zeros(out)
        params[f"W{k}"], params[f"b{k}"] = W, b
        width = out
    return params


def curve_expr(hidden: Sequence[int]) -> E.Expr:
    x = E.arg(0)
    return mlp_expr(x, hidden) * E.sin(math.pi * x) - x


def travel_time(y: ops.FunctionValue, grid: Grid) -> ops.FunctionValue:
    """``integral sqrt(1 + y'^2) / sqrt(-y)`` on ``grid``."""
    return ops.integrate(ops.sqrt(1.0 + ops.nabla(y) ** 2) / ops.sqrt(-y), grid)


# ---------------------------------------------------------------------------
# cycloid reference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cycloid:
    """``x = a (t - sin t)``, ``y = -a (1 - cos t)`` for ``t`` in ``[0, T]``."""

    a: float
    T: float

    def y(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        out = np.empty_like(x)
        for i, xi in enumerate(x):
            if xi <= 0.0:
                out[i] = 0.0
                continue
            t = brentq(lambda s: self.a * (s - math.sin(s)) - xi, 0.0, self.T * (1 + 1e-12), xtol=1e-15)
            out[i] = -self.a * (1.0 - math.cos(t))
        return out


def cycloid_through(x1: float = 1.0, y1: float = -1.0) -> Cycloid:
    """The cycloid from the origin through ``(x1, y1)`` with ``y1 < 0``."""
    ratio = x1 / -y1
    T = brentq(lambda t: (t - math.sin(t)) / (1.0 - math.cos(t)) - ratio, 1e-3, 2 * math.pi - 1e-3, xtol=1e-15)
    a = -y1 / (1.0 - math.cos(T))
    return Cycloid(a, T)


# ---------------------------------------------------------------------------
# gradient estimators
# ---------------------------------------------------------------------------

class Estimators:
    """Lowered pointwise expressions for the curve, integrand and functional derivative.

    ``y_expr`` reads the position as argument 0 and the weights as named
    parameters.  Everything lowered here is evaluated in one batch over the grid.
    """

    def __init__(self, y_expr: E.Expr, param_shapes: Dict[str, tuple], grid: Grid, lagrangian=None):
        self.grid = grid
        self.names = sorted(param_shapes)
        self.param_shapes = dict(param_shapes)
        y = ops.from_expr(y_expr, [()])
        self.y = y
        if lagrangian is None:
            functional = lambda f: travel_time(f, grid)
        else:
            functional = lambda f: ops.integrate(ops.compose(lagrangian, [ops.identity(), f, ops.nabla(f)]), grid)
        self.functional = functional
        self.y_expr = y.lowered()[0]
        integrand = functional(y).operands[0]
        self.integrand_expr = integrand.lowered()[0]
        self.fd = functional_grad(functional, y)
        self.fd_expr = self.fd.lowered()[0]
        c = E.arg(1)
        self._grad_integrand = E.grad(self.integrand_expr, wrt_params=self.names)
        self._grad_pairing = E.grad(c * self.y_expr, wrt_params=self.names)
        self._grad_fd_sq = E.grad(self.fd_expr * self.fd_expr, wrt_params=self.names)

    def _eval(self, roots, params, extra=()):
        x = self.grid.points
        return E.core.evaluate_loose(roots, [x, *extra], params)

    def _weighted(self, values) -> Dict[str, np.ndarray]:
        out = {}
        for name, v in zip(self.names, values):
            v = np.broadcast_to(v, (self.grid.n,) + self.param_shapes[name])
            out[name] = self.grid.integrate_values(v)
        return out

    def curve(self, params) -> np.ndarray:
        return np.broadcast_to(self._eval([self.y_expr], params)[0], (self.grid.n,)).copy()

    def check_below_start(self, params):
        yv = self.curve(params)
        bad = np.flatnonzero(~(yv < 0.0))
        if len(bad):
            i = bad[0]
            raise SingularIntegrand(f"curve reaches y={yv[i]:.3g} >= 0 at x={self.grid.points[i]:.3g}")

    def value(self, params) -> float:
        v = self._eval([self.integrand_expr], params)[0]
        return float(self.grid.integrate_values(np.broadcast_to(v, (self.grid.n,))))

    def fd_values(self, params) -> np.ndarray:
        v = self._eval([self.fd_expr], params)[0]
        return np.broadcast_to(v, (self.grid.n,)).copy()

    def fd_norm(self, params) -> float:
        """Quadrature value of ``integral (dT/dy)^2``."""
        return float(self.grid.integrate_values(self.fd_values(params) ** 2))

    def grad_F(self, params) -> Dict[str, np.ndarray]:
        return self._weighted(self._eval([self._grad_integrand[n] for n in self.names], params))

    def grad_F_via_FD(self, params) -> Dict[str, np.ndarray]:
        c = self.fd_values(params)
        return self._weighted(self._eval([self._grad_pairing[n] for n in self.names], params, [c]))

    def grad_FD(self, params) -> Dict[str, np.ndarray]:
        return self._weighted(self._eval([self._grad_fd_sq[n] for n in self.names], params))

    def gradient(self, estimator: str, params) -> Dict[str, np.ndarray]:
        if estimator == "minimize_F":
            return self.grad_F(params)
        if estimator == "minimize_F_via_FD":
            return self.grad_F_via_FD(params)
        if estimator == "minimize_FD":
            return self.grad_FD(params)
        raise ConfigError(f"unknown estimator {estimator!r}; choose one of {ESTIMATORS}")


def flatten(g: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(g[k]) for k in sorted(g)])


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class Result:
    steps: List[tuple] = field(default_factory=list)  # (step, loss, grad_norm)
    curve: List[tuple] = field(default_factory=list)  # (x, y)
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    graph_roots: list = field(default_factory=list)


def run(estimator: str = "minimize_FD", hidden=(16, 16, 1), steps: int = 2000, step_size: float = 1e-2,
        grid: "Grid | None" = None, seed: int = 0, first_scale: float = 15.0, sag: float = -0.5) -> Result:
    """Fixed-step gradient descent on the network weights.

    Each recorded step holds the travel time and ``integral (dT/dy)^2`` before
    the update; a final row after the last update is appended.
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; choose one of {ESTIMATORS}")
    grid = grid if grid is not None else make_uniform(0.01, 1.0, 50)
    t0 = time.perf_counter()
    params = init_params(hidden, seed, first_scale, sag)
    est = Estimators(curve_expr(hidden), {k: v.shape for k, v in params.items()}, grid)
    out = Result()
    for step in range(steps + 1):
        est.check_below_start(params)
        out.steps.append((step, est.value(params), est.fd_norm(params)))
        if step == steps:
            break
        g = est.gradient(estimator, params)
        params = {k: params[k] - step_size * g[k] for k in params}
    cyc = cycloid_through()
    yv = est.curve(params)
    out.curve = list(zip(grid.points.tolist(), yv.tolist()))
    out.params = params
    out.extra = {
        "estimator": estimator,
        "cycloid_max_deviation": float(np.max(np.abs(yv - cyc.y(grid.points)))),
        "initial_fd_norm": out.steps[0][2],
        "final_fd_norm": out.steps[-1][2],
        "optimize_seconds": time.perf_counter() - t0,
    }
    out.graph_roots = [est.fd]
    return out


# ---------------------------------------------------------------------------
# estimator equivalence
# ---------------------------------------------------------------------------

def polynomial_setup(degree: int = 3):
    """A polynomial problem where the two weight-gradient estimators must agree.

    ``y = x (1 - x) sum_k c_k x^k - x`` makes ``dy/dc`` vanish at both ends of
    ``[0, 1]``, and the Lagrangian is polynomial in ``(x, y, y')``.
    """
    x = E.arg(0)
    c = E.param("c", (degree + 1,))
    powers = E.stack([x ** k if k else E.const(1.0) + 0.0 * x for k in range(degree + 1)])
    y_expr = x * (1.0 - x) * E.dot(c, powers) - x
    lag = ops.function(lambda s, w, dw: 0.5 * dw * dw + s * w * w + w * w * w / 3.0 + s * s * dw,
                       "F[f[],f[],f[],f[]]")
    return y_expr, {"c": (degree + 1,)}, lag


def estimator_gap(y_expr: E.Expr, param_shapes: Dict[str, tuple], grid: Grid, params: Dict[str, np.ndarray],
                  lagrangian=None):
    """``(g_F, g_F_via_FD, max relative gap, max absolute gap)`` for one parameter setting."""
    est = Estimators(y_expr, param_shapes, grid, lagrangian)
    g1 = flatten(est.grad_F(params))
    g2 = flatten(est.grad_F_via_FD(params))
    rel = float(np.max(np.abs(g1 - g2)) / max(np.max(np.abs(g1)), 1e-300))
    return g1, g2, rel, float(np.max(np.abs(g1 - g2)))
