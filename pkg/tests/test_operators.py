import json
import math

import numpy as np
import pytest

from opdiff import engine as E
from opdiff import operators as ops
from opdiff.errors import InvalidPermutation, IndexOutOfRange, NotLinear, ShapeMismatch
from opdiff.quadrature import make_gauss_legendre, make_uniform

SIN = ops.function(E.sin, "F[f[],f[]]")
EXP = ops.function(E.exp, "F[f[],f[]]")
SQUARE = ops.function(lambda x: x * x, "F[f[],f[]]")
ADD2 = ops.function(lambda a, b: a + b, "F[f[],f[],f[]]")
SUB2 = ops.function(lambda a, b: a - b, "F[f[],f[],f[]]")
XS = np.linspace(-2.0, 2.0, 100)


def test_compose_examples():
    assert ops.compose(SQUARE, [SIN])(math.pi / 2) == pytest.approx(1.0, abs=1e-15)
    assert ops.compose(ADD2, [SIN, EXP])(1.0) == pytest.approx(math.sin(1) + math.e, rel=1e-15)
    assert ops.compose(ADD2, [SIN, EXP])(1.0) == pytest.approx(3.559752813266941, rel=1e-14)
    np.testing.assert_allclose(ops.compose(SIN, [ops.identity()])(XS), np.sin(XS), atol=1e-15)


def test_compose_shape_mismatch():
    vec = ops.function(lambda x: E.stack([x, x]), "F[f[2],f[]]")
    with pytest.raises(ShapeMismatch):
        ops.compose(SIN, [vec])


def test_nabla_examples():
    np.testing.assert_allclose(ops.nabla(SIN)(XS), np.cos(XS), atol=1e-12)
    np.testing.assert_allclose(ops.nabla(ops.nabla(SIN))(XS), -np.sin(XS), atol=1e-12)
    norm2 = ops.function(lambda v: E.sum_axes(v * v), "F[f[],f[3]]")
    np.testing.assert_allclose(ops.nabla(norm2)(np.array([1.0, 2.0, 3.0])), [2.0, 4.0, 6.0])
    with pytest.raises(IndexOutOfRange):
        ops.nabla(SIN, 1)


def test_nabla_of_sum_is_sum_of_nablas():
    f = SIN * EXP + ops.tanh(SIN)
    h = 1e-6
    fd = (f(XS + h) - f(XS - h)) / (2 * h)
    np.testing.assert_allclose(ops.nabla(f)(XS), fd, atol=1e-8)


def test_linearize_examples(rng):
    assert ops.linearize(SIN)(0.0, 1.0) == 1.0
    assert ops.linearize(SQUARE)(3.0, 2.0) == 12.0
    lin = ops.linearize(SIN * EXP)
    assert lin.signature.arity == 2
    assert lin.linear_flags == (False, True)
    x, d1, d2 = rng.normal(size=(3, 20))
    a, b = 0.3, -2.1
    np.testing.assert_allclose(lin(x, a * d1 + b * d2), a * lin(x, d1) + b * lin(x, d2), rtol=1e-12, atol=1e-14)


def test_linear_transpose_matrix(rng):
    M = rng.normal(size=(2, 3))
    f = ops.function(lambda x: E.dot(E.const(M), x), "F[f[2],f[3]]")
    t = ops.linear_transpose(f, 0)
    assert str(t.signature) == "F[f[3],f[2]]"
    np.testing.assert_allclose(np.stack([t(e) for e in np.eye(2)], axis=-1), M.T, atol=1e-15)
    tt = ops.linear_transpose(t, 0)
    np.testing.assert_allclose(np.stack([tt(e) for e in np.eye(3)], axis=-1), M, atol=1e-12)


def test_linear_transpose_of_linearized_sine():
    t = ops.linear_transpose(ops.linearize(SIN), 1)
    x, y = np.linspace(-1, 1, 9), np.linspace(2, 3, 9)
    np.testing.assert_allclose(t(x, y), np.cos(x) * y, rtol=1e-15)


def test_linear_transpose_refuses_nonlinear_at_construction():
    with pytest.raises(NotLinear):
        ops.linear_transpose(SIN, 0)


def test_integrate_examples():
    g = make_gauss_legendre(0.0, 1.0, 64)
    assert abs(float(ops.integrate(ops.identity(), g)) - 0.5) <= 1e-14
    cube = ops.function(lambda x: x * x * x, "F[f[],f[]]")
    assert abs(float(ops.integrate(cube, make_gauss_legendre(-1.0, 1.0, 4)))) <= 1e-15
    s = ops.function(lambda x: E.sin(math.pi * x), "F[f[],f[]]")
    assert abs(float(ops.integrate(s, g)) - 2 / math.pi) <= 1e-14


def test_integrate_one_argument_of_two():
    g = make_gauss_legendre(0.0, 1.0, 16)
    f = ops.function(lambda x, y: E.sin(x * y), "F[f[],f[],f[]]")
    out = ops.integrate(f, g, argnum=1)
    assert out.arity == 1
    x = np.array([0.5, 2.0])
    np.testing.assert_allclose(out(x), (1 - np.cos(x)) / x, rtol=1e-13)


def test_integrate_grid_shape_checked():
    v = ops.function(lambda x: E.sum_axes(x), "F[f[],f[2]]")
    with pytest.raises(ShapeMismatch):
        ops.integrate(v, make_uniform(0, 1, 3))


def test_permute_args_examples():
    assert ops.permute_args(SUB2, (1, 0))(2.0, 5.0) == 3.0
    f = ops.function(lambda a, b: E.sum_axes(a) * E.index(b, 0), "F[f[],f[2],f[3]]")
    assert str(ops.permute_args(f, (1, 0)).signature) == "F[f[],f[3],f[2]]"
    three = ops.function(lambda a, b, c: a - 2.0 * b + 3.0 * c * a, "F[f[],f[],f[],f[]]")
    perm = (2, 0, 1)
    inv = tuple(int(i) for i in np.argsort(perm))
    back = ops.permute_args(ops.permute_args(three, perm), inv)
    args = [np.array([0.3, 1.0]), np.array([-1.0, 2.0]), np.array([0.5, 0.25])]
    np.testing.assert_allclose(back(*args), three(*args), rtol=1e-15)
    with pytest.raises(InvalidPermutation):
        ops.permute_args(SUB2, (0, 0))


def test_zip_examples():
    z = ops.zip_functions(SIN, EXP)
    assert z(0.0, 0.0) == (0.0, 1.0)
    v = ops.function(lambda x: E.sum_axes(x), "F[f[],f[3]]")
    zs = ops.zip_functions(SIN, v)
    assert str(zs.signature) == "F[(f[],f[]),f[],f[3]]"
    first = ops.compose(ops.projection([(), ()], 0), [z])
    np.testing.assert_allclose(first(XS, XS), np.sin(XS), rtol=1e-15)


def test_broadcast_examples():
    b = ops.broadcast_fn(SIN, [()], [0])
    assert b(7.0, math.pi / 2) == pytest.approx(1.0, abs=1e-15)
    g = make_gauss_legendre(0.0, 1.0, 12)
    one = ops.constant(1.0, [(), ()])
    lhs = ops.integrate(one * ops.broadcast_fn(EXP, [()], [0]), g, argnum=1)
    np.testing.assert_allclose(lhs(np.array([0.2, 0.9])), math.e - 1, rtol=1e-14)
    with pytest.raises(IndexOutOfRange):
        ops.broadcast_fn(SIN, [()], [3])


def test_pointwise_sugar(rng):
    assert (SIN + EXP)(0.0) == 1.0
    x = rng.uniform(-2, 2, 30)
    np.testing.assert_allclose((SIN * EXP)(x), np.sin(x) * np.exp(x), rtol=1e-15)
    y = ops.function(lambda s: -s - s * s, "F[f[],f[]]")
    num = 1.0 + ops.nabla(y) ** 2
    np.testing.assert_allclose(num(x), 1.0 + (1 + 2 * x) ** 2, rtol=1e-14)
    v = ops.function(lambda s: E.sum_axes(s), "F[f[],f[2]]")
    with pytest.raises(ShapeMismatch):
        SIN + v


def test_local_operator_law(rng):
    phi = ops.function(lambda x, w: E.sin(x) * w + w * w * x, "F[f[],f[],f[]]")
    f = ops.function(lambda x: E.exp(0.3 * x) - x, "F[f[],f[]]")
    x = rng.uniform(-2, 2, 40)
    fx = f(x)
    np.testing.assert_allclose(ops.compose(phi, [ops.identity(), f])(x), np.sin(x) * fx + fx * fx * x, atol=1e-15)


def test_semilocal_construction_matches_direct_formula(rng):
    x = rng.uniform(-1.5, 1.5, 30)
    f = SIN * EXP
    derivs = [f]
    for _ in range(3):
        derivs.append(ops.nabla(derivs[-1]))
    phi = ops.function(lambda s, a, b, c, d: s * a + b * b - c * d + E.tanh(a * d), "F[f[],f[],f[],f[],f[],f[]]")
    got = ops.compose(phi, [ops.identity()] + derivs)(x)
    # closed-form derivatives of sin(x) exp(x)
    s, c, e = np.sin(x), np.cos(x), np.exp(x)
    d0, d1, d2, d3 = s * e, (s + c) * e, 2 * c * e, 2 * (c - s) * e
    np.testing.assert_allclose(got, x * d0 + d1 * d1 - d2 * d3 + np.tanh(d0 * d3), rtol=1e-12, atol=1e-12)


def test_integral_transform_is_linear(rng):
    g = make_gauss_legendre(0.0, 1.0, 16)
    k = ops.function(lambda x, y: E.sin(x + 2.0 * y) * E.exp(-x * y), "F[f[],f[],f[]]")
    f = ops.function(lambda y: E.cos(3.0 * y), "F[f[],f[]]")
    h = ops.function(lambda y: y * y - 0.5, "F[f[],f[]]")
    a, b = 1.7, -0.4
    T = lambda u: ops.integral_transform(k, u, g)
    x = rng.uniform(0, 1, 25)
    np.testing.assert_allclose(T(a * f + b * h)(x), a * T(f)(x) + b * T(h)(x), rtol=1e-12, atol=1e-14)


def _random_linear_probe(f, slot, rng, n=12):
    args = [rng.normal(size=(n,) + s) for s in f.args]
    d1, d2 = rng.normal(size=(2, n) + f.args[slot])
    a, b = rng.normal(size=2)
    def at(d):
        xs = list(args)
        xs[slot] = d
        return f(*xs)
    lhs, rhs = at(a * d1 + b * d2), a * at(d1) + b * at(d2)
    scale = max(np.max(np.abs(lhs)), 1e-300)
    return np.max(np.abs(lhs - rhs)) / scale


def test_linearity_flags_are_sound(rng):
    g = make_gauss_legendre(-1.0, 1.0, 8)
    candidates = [
        ops.linearize(SIN * EXP),
        ops.linear_transpose(ops.linearize(ops.tanh(SIN)), 1),
        ops.integrate(ops.linearize(SIN), g, argnum=0),
        ops.permute_args(ops.linearize(EXP), (1, 0)),
        ops.compose(ADD2, [ops.projection([(), ()], 1), ops.projection([(), ()], 1)]),
        ops.function(lambda x, w: 3.0 * w - E.sin(x) * w, "F[f[],f[],f[]]"),
        ops.nabla(ops.linearize(SIN), 0),
        ops.broadcast_fn(ops.linearize(SIN), [()], [0]),
    ]
    checked = 0
    for f in candidates:
        for slot, flag in enumerate(f.linear_flags):
            if flag:
                assert _random_linear_probe(f, slot, rng) <= 1e-11, (f, slot)
                checked += 1
    assert checked >= len(candidates)


def test_nonlinear_slots_not_flagged():
    assert ops.linearize(SIN).linear_flags[0] is False
    assert (SIN * SIN).linear_flags == (False,)
    assert ops.function(lambda x, w: w + 1.0, "F[f[],f[],f[]]").linear_flags == (False, False)


def test_node_ids_are_structural():
    a = ops.compose(SQUARE, [SIN])
    b = ops.compose(SQUARE, [SIN])
    assert a.id == b.id
    assert a.id != ops.compose(SQUARE, [EXP]).id


def test_graph_dump_is_json():
    f = ops.integrate(ops.nabla(SIN) * EXP, make_uniform(0, 1, 4))
    d = json.loads(ops.dump_graph([f]))
    prims = {n["primitive"] for n in d["nodes"]}
    assert {"integrate", "nabla", "compose", "leaf"} <= prims
    for n in d["nodes"]:
        assert {"id", "primitive", "params", "children", "signature", "linear_flags"} <= set(n)


def test_bind_params_replaces_named_weights():
    w = E.param("w")
    f = ops.from_expr(w * E.arg(0), [()])
    (bound,) = ops.bind_params([f], {"w": np.array(2.5)})
    assert bound(2.0) == 5.0
