import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opdiff import operators as ops
from opdiff import engine as E
from opdiff.errors import ConvergenceFailure, InvalidRange, ShapeMismatch
from opdiff.quadrature import (Grid, gauss_legendre_nodes, inner_product, make_gauss_legendre, make_uniform,
                               product_grid)


def test_uniform_midpoints():
    g = make_uniform(0.0, 1.0, 4)
    np.testing.assert_allclose(g.points, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(g.weights, 0.25)


@pytest.mark.parametrize("n", [1, 3, 50])
def test_uniform_integrates_constant(n):
    assert make_uniform(0.0, 1.0, n).integrate_values(np.ones(n)) == pytest.approx(1.0, abs=1e-15)


def test_uniform_converges_for_square():
    g = make_uniform(0.0, 1.0, 1000)
    assert abs(g.integrate_values(g.points ** 2) - 1.0 / 3.0) <= 1e-6


@pytest.mark.parametrize("a, b, n", [(1.0, 1.0, 3), (2.0, 1.0, 3), (0.0, 1.0, 0), (0.0, math.inf, 3)])
def test_invalid_ranges(a, b, n):
    with pytest.raises(InvalidRange):
        make_uniform(a, b, n)


def test_two_point_rule():
    x, w = gauss_legendre_nodes(2)
    np.testing.assert_allclose(x, [-1 / math.sqrt(3), 1 / math.sqrt(3)], rtol=1e-15)
    np.testing.assert_allclose(w, [1.0, 1.0], rtol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 16, 64, 200])
def test_nodes_match_numpy(n):
    x, w = gauss_legendre_nodes(n)
    xr, wr = np.polynomial.legendre.leggauss(n)
    np.testing.assert_allclose(x, xr, atol=1e-14)
    np.testing.assert_allclose(w, wr, atol=1e-14)


def test_newton_failure_reported():
    with pytest.raises(ConvergenceFailure):
        gauss_legendre_nodes(40, tol=0.0, max_iter=3)


def test_odd_and_sine_integrals():
    g = make_gauss_legendre(-1.0, 1.0, 2)
    assert abs(g.integrate_values(g.points ** 3)) <= 1e-16
    g = make_gauss_legendre(0.0, 1.0, 16)
    assert abs(g.integrate_values(np.sin(np.pi * g.points)) - 2 / np.pi) <= 1e-12


def abs_moment_scale(c, a, b):
    """``sum_k |c_k| integral_a^b |x|^k dx``: the size of the terms being summed."""
    total = 0.0
    for k, ck in enumerate(c):
        if a < 0 < b:
            m = (abs(a) ** (k + 1) + b ** (k + 1)) / (k + 1)
        else:
            m = abs(b ** (k + 1) - a ** (k + 1)) / (k + 1)
        total += abs(ck) * m
    return total


def poly_integral(c, a, b):
    anti = np.polynomial.polynomial.polyint(c)
    return np.polynomial.polynomial.polyval(b, anti) - np.polynomial.polynomial.polyval(a, anti)


@settings(max_examples=30, deadline=None)
@given(n=st.sampled_from([2, 4, 8, 16]), seed=st.integers(0, 2 ** 31 - 1),
       a=st.floats(-3, 0), width=st.floats(0.5, 4))
def test_exact_for_polynomials_up_to_degree_2n_minus_1(n, seed, a, width):
    c = np.random.default_rng(seed).normal(size=2 * n)
    b = a + width
    g = make_gauss_legendre(a, b, n)
    got = g.integrate_values(np.polynomial.polynomial.polyval(g.points, c))
    assert abs(got - poly_integral(c, a, b)) <= 1e-13 * abs_moment_scale(c, a, b)


def test_refinement_converges_monotonically():
    errs = []
    exact = math.sqrt(math.pi) * math.erf(2.0)
    for n in (2, 4, 8, 16):
        g = make_gauss_legendre(-2.0, 2.0, n)
        errs.append(abs(g.integrate_values(np.exp(-g.points ** 2)) - exact))
    diffs = [abs(errs[i] - errs[i + 1]) for i in range(3)]
    assert all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:]))


def test_inner_product_examples():
    g = make_gauss_legendre(0.0, 2 * math.pi, 64)
    s = ops.function(E.sin, "F[f[],f[]]")
    assert abs(inner_product(s, s, g) - math.pi) <= 1e-10
    assert inner_product(s, ops.zeros_like(s), g) == 0.0
    c = ops.function(lambda x: E.exp(E.cos(x)), "F[f[],f[]]")
    assert inner_product(s, c, g) == inner_product(c, s, g)


def test_inner_product_shape_checks():
    g = make_gauss_legendre(0.0, 1.0, 4)
    v = ops.function(lambda x: x, "F[f[2],f[2]]")
    with pytest.raises(ShapeMismatch):
        inner_product(v, v, g)


def test_product_grid_integrates_separable():
    g1 = make_gauss_legendre(0.0, 1.0, 6)
    g2 = make_gauss_legendre(-1.0, 2.0, 5)
    p = product_grid(g1, g2)
    assert p.points.shape == (30, 2)
    vals = p.points[:, 0] ** 2 * p.points[:, 1]
    assert abs(p.integrate_values(vals) - (1 / 3) * 1.5) <= 1e-14


def test_grid_validation_and_config_round_trip():
    with pytest.raises(InvalidRange):
        Grid([0.0, 1.0], [0.5, 0.0])
    with pytest.raises(ShapeMismatch):
        Grid([0.0, 1.0], [0.5])
    g = make_gauss_legendre(0.0, 1.0, 7)
    h = Grid.from_config(g.to_config())
    np.testing.assert_array_equal(g.points, h.points)
    assert g.digest == h.digest
    s = Grid.from_config({"points": [0.1, 0.2], "weights": [1.0, 2.0]})
    assert s.kind == "supplied"
