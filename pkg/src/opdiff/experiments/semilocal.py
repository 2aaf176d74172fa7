"""Potential of a one-dimensional semilocal energy ``E(rho) = integral rho eps(rho, rho')``.

``eps`` is a sum of monomials ``c rho^i (rho')^j`` with integer ``j >= 0``.
The potential ``v = dE/drho`` comes from ``functional_grad``; it is compared
with the Euler-Lagrange expression written out by hand and evaluated from
closed-form derivatives of the density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .. import engine as E
from .. import operators as ops
from ..autodiff import functional_grad
from ..errors import ConfigError, NonPositiveDensity
from ..quadrature import Grid, make_gauss_legendre

DIRAC_EXCHANGE = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)

# each term is (i, j, c) for c rho^i (rho')^j
PRESETS = {
    "density": [(1.0, 0, 1.0)],
    "gradient_ratio": [(-1.0, 2, 1.0)],
    "dirac_exchange": [(1.0 / 3.0, 0, -DIRAC_EXCHANGE)],
}


def _terms(eps) -> List[Tuple[float, int, float]]:
    if isinstance(eps, str):
        if eps not in PRESETS:
            raise ConfigError(f"unknown energy density {eps!r}; presets are {sorted(PRESETS)}")
        return PRESETS[eps]
    terms = []
    for t in eps:
        i, j, c = t
        if int(j) != j or j < 0:
            raise ConfigError(f"gradient powers must be non-negative integers, got {j}")
        terms.append((float(i), int(j), float(c)))
    return terms


def _int_power(e: E.Expr, j: int) -> E.Expr:
    out = e
    for _ in range(j - 1):
        out = out * e
    return out


def energy_integrand(terms) -> ops.FunctionValue:
    """``phi(rho, p) = rho eps(rho, p)`` as a function of two scalars."""
    def phi(r, p):
        total = E.const(0.0)
        for i, j, c in terms:
            m = E.const(c)
            if i + 1.0 != 0.0:
                m = m * (r if i + 1.0 == 1.0 else E.power(r, i + 1.0))
            if j > 0:
                m = m * _int_power(p, j)
            total = total + m
        return total
    return ops.function(phi, "F[f[],f[],f[]]")


def euler_lagrange(terms, rho, drho, d2rho) -> np.ndarray:
    """``d phi/d rho - d/dx d phi/d rho'`` from sampled ``rho, rho', rho''``."""
    out = np.zeros_like(rho)
    for i, j, c in terms:
        k = i + 1.0
        dphi_drho = k * rho ** (k - 1) * drho ** j if k != 0 else 0.0
        if j == 0:
            ddx = 0.0
        else:
            # d/dx [ j rho^k p^(j-1) ] = j k rho^(k-1) p^j + j (j-1) rho^k p^(j-2) rho''
            ddx = j * k * rho ** (k - 1) * drho ** j if k != 0 else 0.0
            if j >= 2:
                ddx = ddx + j * (j - 1) * rho ** k * drho ** (j - 2) * d2rho
        out = out + c * (dphi_drho - ddx)
    return out


@dataclass(frozen=True)
class GaussianDensity:
    """``rho(x) = amplitude exp(-x^2 / (2 width^2)) + floor``."""

    amplitude: float = 1.0
    width: float = 1.0
    floor: float = 0.1

    def expr(self, x: E.Expr) -> E.Expr:
        return self.amplitude * E.exp(x * x * (-0.5 / self.width ** 2)) + self.floor

    def derivatives(self, x):
        g = self.amplitude * np.exp(-0.5 * x * x / self.width ** 2)
        s2 = self.width ** 2
        return g + self.floor, -x / s2 * g, (x * x / s2 - 1.0) / s2 * g


@dataclass
class Result:
    energy: float = 0.0
    rows: List[tuple] = field(default_factory=list)  # (x, rho, v, oracle)
    max_deviation: float = 0.0
    graph_roots: list = field(default_factory=list)


def run(eps="gradient_ratio", density: "GaussianDensity | None" = None, grid: "Grid | None" = None) -> Result:
    density = density if density is not None else GaussianDensity()
    grid = grid if grid is not None else make_gauss_legendre(-4.0, 4.0, 64)
    terms = _terms(eps)
    x = grid.points
    r, dr, d2r = density.derivatives(x)
    if np.any(~(r > 0.0)):
        i = int(np.flatnonzero(~(r > 0.0))[0])
        raise NonPositiveDensity(f"density is {r[i]:.3g} at x={x[i]:.3g}")
    rho = ops.function(density.expr, "F[f[],f[]]")
    phi = energy_integrand(terms)

    def energy(f):
        return ops.integrate(ops.compose(phi, [f, ops.nabla(f)]), grid)

    v = functional_grad(energy, rho)
    vv = np.broadcast_to(v(x), x.shape)
    oracle = euler_lagrange(terms, r, dr, d2r)
    oracle = np.broadcast_to(oracle, x.shape)
    out = Result()
    out.energy = float(energy(rho))
    out.rows = list(zip(x.tolist(), r.tolist(), vv.tolist(), oracle.tolist()))
    out.max_deviation = float(np.max(np.abs(vv - oracle)))
    out.graph_roots = [v]
    return out


def potential_on(terms: Sequence, rho_values: np.ndarray) -> np.ndarray:
    """Oracle potential for a constant density (all derivatives zero)."""
    z = np.zeros_like(rho_values)
    return euler_lagrange(_terms(terms), rho_values, z, z)
