
import numpy as np
import pytest
import sympy as sp

from opdiff import engine as E
from opdiff import operators as ops
from opdiff.autodiff import functional_grad, op_jvp, op_transpose, op_vjp
from opdiff.errors import IntegrationRequired, NotLinear, UndefinedTranspose
from opdiff.quadrature import inner_product, make_gauss_legendre

SIN = ops.function(E.sin, "F[f[],f[]]")
EXP = ops.function(E.exp, "F[f[],f[]]")
XS = np.linspace(-2.0, 2.0, 100)


def fn(build, sig="F[f[],f[]]"):
    return ops.function(build, sig)


def test_nabla_vjp_pulls_exp_back_to_minus_exp():
    _, vjp = op_vjp(lambda f: ops.nabla(f), SIN)
    np.testing.assert_allclose(vjp(EXP)(XS), -np.exp(XS), atol=1e-12)


def test_nabla_jvp_example():
    jt = op_jvp(lambda f: ops.nabla(f), [SIN], [fn(lambda x: x * x)])
    np.testing.assert_allclose(jt.primal(XS), np.cos(XS), atol=1e-15)
    np.testing.assert_allclose(jt.tangent(XS), 2 * XS, atol=1e-15)


def test_compose_jvp_in_inner_function_against_difference_quotient():
    f = fn(lambda w: E.tanh(w) * w)
    g = fn(lambda x: E.sin(2.0 * x) + 0.5)
    dg = fn(lambda x: E.exp(-x * x))
    jt = op_jvp(lambda a, b: ops.compose(a, [b]), [f, g], [ops.zeros_like(f), dg])
    eps = 1e-5
    fd = (ops.compose(f, [g + eps * dg])(XS) - ops.compose(f, [g])(XS)) / eps
    np.testing.assert_allclose(jt.tangent(XS), fd, atol=1e-4)


def test_integrate_jvp_with_zero_tangent():
    g = make_gauss_legendre(0, 1, 8)
    jt = op_jvp(lambda f: ops.integrate(f, g), [SIN], [ops.zeros_like(SIN)])
    assert float(jt.tangent) == 0.0


def test_integrate_transpose_augments_the_cotangent():
    g = make_gauss_legendre(0, 1, 8)
    two = ops.function(lambda x, y: x * y, "F[f[],f[],f[]]")
    ct = op_transpose(lambda f: ops.integrate(f, g, argnum=0), [two], fn(lambda y: E.cos(y)))
    x, y = np.array([0.1, 0.7, 3.0]), np.array([0.2, -1.0, 2.0])
    np.testing.assert_allclose(ct(x, y), np.cos(y), rtol=1e-15)


def test_nabla_adjoint_on_wide_grid():
    g = make_gauss_legendre(-8.0, 8.0, 200)
    f = fn(lambda x: E.exp(-x * x))
    dh = fn(lambda x: x * E.exp(-x * x))
    ct = op_transpose(lambda u: ops.nabla(u), [f], dh)
    lhs, rhs = inner_product(ops.nabla(f), dh, g), inner_product(f, ct, g)
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


def test_vjp_of_identity_program():
    _, vjp = op_vjp(lambda f: f, SIN)
    np.testing.assert_allclose(vjp(EXP)(XS), np.exp(XS), rtol=1e-15)


def test_vjp_and_jvp_are_adjoint(rng):
    g = make_gauss_legendre(-6, 6, 200)
    phi = fn(lambda w: E.sin(w) + w * w * w, "F[f[],f[]]")
    prog = lambda f: ops.nabla(ops.compose(phi, [f]))
    f = fn(lambda x: 0.5 * E.exp(-0.2 * x * x))
    for _ in range(3):
        a, b, c = rng.normal(size=3)
        df = fn(lambda x, a=a, b=b: (a + b * x) * E.exp(-x * x))
        dh = fn(lambda x, c=c: E.sin(c * x) * E.exp(-0.5 * x * x))
        jt = op_jvp(prog, [f], [df])
        _, vjp = op_vjp(prog, f)
        lhs, rhs = inner_product(jt.tangent, dh, g), inner_product(df, vjp(dh), g)
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1e-12)


def test_compose_outer_transpose_needs_identity_inner():
    g = fn(lambda x: x * x)
    with pytest.raises(UndefinedTranspose):
        op_transpose(lambda f: ops.compose(f, [g]), [SIN], EXP)
    ct = op_transpose(lambda f: ops.compose(f, [ops.identity()]), [SIN], EXP)
    np.testing.assert_allclose(ct(XS), np.exp(XS), rtol=1e-15)


def test_transpose_through_nonlinear_slot_refused():
    with pytest.raises(NotLinear):
        op_transpose(lambda f: ops.compose(fn(lambda w: w * w), [f]), [SIN], EXP)


def test_transpose_of_linear_transpose_undefined():
    lin = ops.linearize(SIN)
    with pytest.raises(UndefinedTranspose):
        op_transpose(lambda f: ops.linear_transpose(f, 1), [lin], ops.linearize(EXP))


def test_functional_grad_of_square():
    g = make_gauss_legendre(-3, 3, 40)
    F = lambda f: ops.integrate(f * f, g)
    f = fn(lambda x: E.sin(x) + 0.3 * x)
    np.testing.assert_allclose(functional_grad(F, f)(XS), 2 * (np.sin(XS) + 0.3 * XS), rtol=1e-10)


def test_functional_grad_of_dirichlet_energy():
    g = make_gauss_legendre(-6, 6, 100)
    F = lambda f: ops.integrate(ops.nabla(f) ** 2, g)
    f = fn(lambda x: E.exp(-x * x))
    want = -2 * (4 * XS ** 2 - 2) * np.exp(-XS ** 2)
    np.testing.assert_allclose(functional_grad(F, f)(XS), want, atol=1e-4)


def test_functional_grad_of_linear_functional():
    g = make_gauss_legendre(0, 1, 10)
    F = lambda f: ops.integrate(3.0 * f, g)
    np.testing.assert_allclose(functional_grad(F, SIN)(XS), 3.0, rtol=1e-15)


def test_functional_grad_needs_full_integral():
    g = make_gauss_legendre(0, 1, 10)
    with pytest.raises(IntegrationRequired):
        functional_grad(lambda f: f * f, SIN)
    two = ops.function(lambda x, y: x * y, "F[f[],f[],f[]]")
    with pytest.raises(IntegrationRequired):
        functional_grad(lambda f: ops.integrate(f, g, argnum=0), two)


# --- Euler-Lagrange oracle ------------------------------------------------

X, U, P = sp.symbols("x u p")
TERMS = [
    lambda c: c * U ** 2 * sp.sin(X),
    lambda c: c * P ** 2,
    lambda c: c * U * P * X,
    lambda c: c * sp.cos(U),
    lambda c: c * P ** 4 / (1 + X ** 2),
    lambda c: c * sp.exp(0.3 * U) * P,
    lambda c: c * sp.sqrt(1 + P ** 2) * U,
    lambda c: c * sp.tanh(U * X),
]
ENGINE = {"sin": E.sin, "cos": E.cos, "exp": E.exp, "tanh": E.tanh, "sqrt": E.sqrt, "log": E.log}


def random_phi(rng):
    picks = rng.choice(len(TERMS), size=3, replace=False)
    return sum(TERMS[i](sp.Float(round(rng.normal(), 3))) for i in picks)


def euler_lagrange_oracle(phi, f_sym):
    """``dphi/du - d/dx dphi/dp`` with ``u = f(x)``, ``p = f'(x)``, all in sympy."""
    df = sp.diff(f_sym, X)
    sub = {U: f_sym, P: df}
    expr = sp.diff(phi, U).subs(sub) - sp.diff(sp.diff(phi, P).subs(sub), X)
    return sp.lambdify(X, expr, "numpy")


@pytest.mark.parametrize("seed", range(5))
def test_functional_grad_matches_euler_lagrange(seed):
    rng = np.random.default_rng(seed)
    phi = random_phi(rng)
    g = make_gauss_legendre(-2.0, 2.0, 48)
    phi_fv = ops.function(sp.lambdify((X, U, P), phi, [ENGINE]), "F[f[],f[],f[],f[]]")
    a, b = rng.uniform(0.5, 1.5, size=2)
    f_sym = sp.sin(a * X) + sp.Float(round(b, 3)) * X ** 2 / 4
    f = ops.function(sp.lambdify(X, f_sym, [ENGINE]), "F[f[],f[]]")
    F = lambda u: ops.integrate(ops.compose(phi_fv, [ops.identity(), u, ops.nabla(u)]), g)
    got = functional_grad(F, f)(g.points)
    want = euler_lagrange_oracle(phi, f_sym)(g.points)
    interior = slice(2, -2)
    np.testing.assert_allclose(got[interior], np.broadcast_to(want, got.shape)[interior], atol=1e-4, rtol=1e-8)


def test_gradient_map_differentiates_again():
    g = make_gauss_legendre(-1, 1, 20)
    F = lambda f: ops.integrate(f * f * f, g)
    grad_map = lambda f: functional_grad(F, f)
    f = fn(lambda x: E.cos(x) + 0.2)
    df = fn(lambda x: x * x - 0.1)
    np.testing.assert_allclose(grad_map(f)(XS), 3 * (np.cos(XS) + 0.2) ** 2, rtol=1e-12)
    jt = op_jvp(grad_map, [f], [df])
    eps = 1e-5
    fd = (grad_map(f + eps * df)(XS) - grad_map(f - eps * df)(XS)) / (2 * eps)
    np.testing.assert_allclose(jt.tangent(XS), fd, atol=1e-6)
    np.testing.assert_allclose(jt.tangent(XS), 6 * (np.cos(XS) + 0.2) * (XS ** 2 - 0.1), rtol=1e-10, atol=1e-12)


def test_trace_record_is_topological():
    _, vjp = op_vjp(lambda f: ops.nabla(ops.compose(fn(E.tanh), [f])), SIN)
    rec = vjp.trace
    assert len(rec) >= 2
    for k, (primitive, slots, _, _) in enumerate(rec):
        assert primitive in {"compose", "nabla", "linearize", "leaf"}
        for s in slots:
            assert s == "fixed" or str(s).startswith("in:") or s < k
    assert any(str(s).startswith("in:") for _, slots, _, _ in rec for s in slots)
