import math

import numpy as np
import pytest
import sympy as sp

from opdiff import engine as E
from opdiff import operators as ops
from opdiff.autodiff import functional_grad
from opdiff.errors import ConfigError, GraphTooLarge, NonPositiveDensity, SingularIntegrand
from opdiff.experiments import brachistochrone as B
from opdiff.experiments import nonlocal_kernel as N
from opdiff.experiments import semilocal as S
from opdiff.quadrature import make_gauss_legendre, make_uniform


# --- brachistochrone ------------------------------------------------------

def test_cycloid_passes_through_endpoints():
    c = B.cycloid_through()
    assert abs(c.a * (c.T - math.sin(c.T)) - 1.0) <= 1e-14
    assert abs(c.a * (1 - math.cos(c.T)) - 1.0) <= 1e-14
    assert c.T == pytest.approx(2.412, abs=1e-3)
    np.testing.assert_allclose(c.y([1.0]), [-1.0], atol=1e-12)


def test_cycloid_conserves_first_integral():
    # sqrt(-y) sqrt(1 + y'^2) is constant along the optimal curve
    c = B.cycloid_through()
    x = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    dy = (c.y(x + h) - c.y(x - h)) / (2 * h)
    q = np.sqrt(-c.y(x)) * np.sqrt(1 + dy ** 2)
    np.testing.assert_allclose(q, math.sqrt(2 * c.a), rtol=1e-7)


def test_travel_time_derivative_matches_euler_lagrange():
    g = make_uniform(0.01, 1.0, 50)
    y = ops.function(lambda x: -x - 0.5 * E.sin(math.pi * x), "F[f[],f[]]")
    fd = functional_grad(lambda f: B.travel_time(f, g), y)
    X = sp.symbols("x")
    ys = -X - sp.Rational(1, 2) * sp.sin(sp.pi * X)
    u, p = sp.symbols("u p")
    lag = sp.sqrt(1 + p ** 2) / sp.sqrt(-u)
    sub = {u: ys, p: sp.diff(ys, X)}
    el = sp.diff(lag, u).subs(sub) - sp.diff(sp.diff(lag, p).subs(sub), X)
    want = sp.lambdify(X, el, "numpy")(g.points)
    np.testing.assert_allclose(fd(g.points), want, rtol=1e-10)


def test_network_gradients_against_finite_differences():
    hidden = (4, 3, 1)
    params = B.init_params(hidden, seed=3)
    est = B.Estimators(B.curve_expr(hidden), {k: v.shape for k, v in params.items()}, make_uniform(0.01, 1, 50))
    g = est.grad_FD(params)
    eps = 1e-6
    for name in ("W0", "W1", "b2"):
        idx = (0,) * params[name].ndim
        up = {k: v.copy() for k, v in params.items()}
        dn = {k: v.copy() for k, v in params.items()}
        up[name][idx] += eps
        dn[name][idx] -= eps
        fd = (est.fd_norm(up) - est.fd_norm(dn)) / (2 * eps)
        assert abs(g[name][idx] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_estimators_agree_with_exact_quadrature_and_vanishing_variations(rng):
    y_expr, shapes, lag = B.polynomial_setup(degree=3)
    grid = make_gauss_legendre(0.0, 1.0, 20)
    for _ in range(3):
        params = {"c": 0.3 * rng.normal(size=4)}
        g1, g2, rel, _ = B.estimator_gap(y_expr, shapes, grid, params, lag)
        assert rel <= 1e-6
        assert np.max(np.abs(g1)) > 1e-3


def test_estimators_differ_on_coarse_grid():
    hidden = (16, 16, 1)
    params = B.init_params(hidden, seed=0)
    shapes = {k: v.shape for k, v in params.items()}
    _, _, _, gap = B.estimator_gap(B.curve_expr(hidden), shapes, make_uniform(0.01, 1.0, 50), params)
    assert gap > 1e-3


def test_initial_curve_independent_of_seed():
    g = make_uniform(0.01, 1.0, 50)
    curves = []
    for seed in (0, 5):
        p = B.init_params((16, 16, 1), seed=seed)
        est = B.Estimators(B.curve_expr((16, 16, 1)), {k: v.shape for k, v in p.items()}, g)
        curves.append(est.curve(p))
    np.testing.assert_allclose(curves[0], curves[1], rtol=0, atol=0)
    np.testing.assert_allclose(curves[0], -0.5 * np.sin(np.pi * g.points) - g.points, rtol=1e-14)


@pytest.mark.parametrize("estimator", B.ESTIMATORS)
def test_short_descent_lowers_objective(estimator):
    res = B.run(estimator, hidden=(8, 8, 1), steps=30, step_size=5e-3)
    assert len(res.steps) == 31
    if estimator == "minimize_FD":
        assert res.steps[-1][2] < res.steps[0][2]
    else:
        assert res.steps[-1][1] < res.steps[0][1]
    assert len(res.curve) == 50


def test_runs_are_deterministic():
    a = B.run(hidden=(4, 1), steps=5, seed=2)
    b = B.run(hidden=(4, 1), steps=5, seed=2)
    assert a.steps == b.steps
    assert a.curve == b.curve


def test_curve_above_start_is_rejected():
    with pytest.raises(SingularIntegrand):
        B.run(hidden=(4, 1), steps=1, sag=2.0)


def test_bad_configuration():
    with pytest.raises(ConfigError):
        B.run("minimize_G", steps=1)
    with pytest.raises(ConfigError):
        B.mlp_expr(E.arg(0), (4, 2))


# --- nonlocal descent -----------------------------------------------------

def test_initial_functions():
    f, b, t, k = N.initial_functions()
    x = np.array([0.1, 0.4])
    np.testing.assert_allclose(f(x), np.sin(4 * np.pi * x))
    np.testing.assert_allclose(b(x), np.sin(np.pi * x))
    np.testing.assert_allclose(t(x), np.cos(np.pi * x))
    np.testing.assert_allclose(k(x, x[::-1]), np.sin(x) + np.cos(x[::-1]))


def test_layer_against_direct_quadrature():
    g = make_gauss_legendre(0, 1, 12)
    f, b, t, k = N.initial_functions()
    h = N.network(f, g)(k, b, k, b)
    x = np.array([0.25, 0.8])
    y, w = g.points, g.weights
    h1 = np.tanh(np.array([np.sum(w * (np.sin(xi) + np.cos(y)) * np.sin(4 * np.pi * y)) for xi in y])
                 + np.sin(np.pi * y))
    want = [np.sum(w * (np.sin(xi) + np.cos(y)) * h1) + np.sin(np.pi * xi) for xi in x]
    np.testing.assert_allclose(h(x), want, rtol=1e-13)


def test_nonlocal_loss_decreases_and_graph_grows():
    res = N.run(steps=4, sample_points=3)
    losses = [s[1] for s in res.steps]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert all(b > a for a, b in zip(res.node_counts, res.node_counts[1:]))
    assert len(res.kernel) == 5 * 9


def test_nonlocal_zero_step_keeps_loss():
    res = N.run(steps=3, step_size=0.0, sample_points=2)
    losses = [s[1] for s in res.steps]
    assert max(losses) - min(losses) == 0.0


def test_nonlocal_graph_budget():
    with pytest.raises(GraphTooLarge):
        N.run(steps=4, node_budget=60, sample_points=2)


# --- semilocal demo -------------------------------------------------------

def test_density_preset_gives_twice_density():
    res = S.run("density")
    x, rho, v, _ = map(np.array, zip(*res.rows))
    np.testing.assert_allclose(v, 2 * rho, rtol=1e-14)


@pytest.mark.parametrize("eps", ["gradient_ratio", "dirac_exchange", [[0.5, 3, 0.7], [2.0, 1, -0.3], [-1, 2, 0.2]]])
def test_potential_matches_euler_lagrange(eps):
    assert S.run(eps).max_deviation <= 1e-4


def test_constant_density_gradient_only_energy():
    res = S.run("gradient_ratio", S.GaussianDensity(0.0, 1.0, 0.5))
    v = np.array([r[2] for r in res.rows])
    np.testing.assert_array_equal(v, 0.0)
    mixed = [[1.0, 0, 1.0], [-1.0, 2, 5.0]]
    res = S.run(mixed, S.GaussianDensity(0.0, 1.0, 0.5))
    v = np.array([r[2] for r in res.rows])
    np.testing.assert_allclose(v, S.potential_on(mixed, np.full_like(v, 0.5)), rtol=1e-15)
    np.testing.assert_allclose(v, 2 * 0.5, rtol=1e-15)


def test_non_positive_density_rejected():
    with pytest.raises(NonPositiveDensity):
        S.run("density", S.GaussianDensity(1.0, 1.0, -0.5))


def test_unknown_preset():
    with pytest.raises(ConfigError):
        S.run("lyp")
