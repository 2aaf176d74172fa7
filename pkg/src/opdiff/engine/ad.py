"""Symbolic forward and reverse differentiation of :class:`Expr` graphs.

Forward mode builds tangent expressions alongside the primal DAG; the
Jacobian is assembled from forward passes over basis tangents.  Reverse
mode is a backward sweep that emits cotangent expressions; applied to an
expression that is linear in one argument it yields that argument's
transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import IndexOutOfRange, MissingRule, NotLinear, ShapeMismatch
from ..signature import TensorShape, format_shape
from . import core as C
from .core import Expr

# ---------------------------------------------------------------------------
# helpers that keep "no tangent" as None instead of building zero graphs
# ---------------------------------------------------------------------------


def _fit(t: Expr, shape: TensorShape) -> Expr:
    return t if t.shape == shape else C.broadcast_to(t, shape)


def _unbroadcast(c: Expr, shape: TensorShape) -> Expr:
    if c.shape == shape:
        return c
    if shape == ():
        return C.sum_axes(c)
    raise ShapeMismatch(f"cannot reduce cotangent {format_shape(c.shape)} to {format_shape(shape)}")


def _plus(a: Optional[Expr], b: Optional[Expr]) -> Optional[Expr]:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _times(t: Optional[Expr], factor: Expr) -> Optional[Expr]:
    return None if t is None else t * factor


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------

def jvp_exprs(roots: Sequence[Expr], leaf_tangent: Callable[[Expr], Optional[Expr]]) -> List[Expr]:
    """Tangent expressions of ``roots``.

    ``leaf_tangent`` maps ``arg``/``param`` leaves to their tangent expression
    (``None`` for zero).  Results are always Exprs of the root shapes.
    """
    tan: Dict[int, Optional[Expr]] = {}
    for node in C.topo_order(roots):
        tan[id(node)] = _jvp_node(node, tan, leaf_tangent)
    out = []
    for r in roots:
        t = tan[id(r)]
        out.append(C.zeros(r.shape) if t is None else _fit(t, r.shape))
    return out


def _jvp_node(node: Expr, tan, leaf_tangent) -> Optional[Expr]:
    op = node.op
    if op in ("arg", "param"):
        t = leaf_tangent(node)
        if t is not None and t.shape != node.shape:
            raise ShapeMismatch(f"tangent {format_shape(t.shape)} for leaf of shape {format_shape(node.shape)}")
        return t
    if op in ("const", "bound"):
        return None
    if op == "gridsum":
        tb = tan[id(node.params["body"])]
        return None if tb is None else C.gridsum(tb, node.params["var"], node.params["grid"])
    ts = [tan[id(o)] for o in node.operands]
    if all(t is None for t in ts):
        return None
    x = node.operands[0]
    if op in ("add", "sub"):
        a, b = ts
        if op == "sub" and b is not None:
            b = -b
        out = _plus(a, b)
        return _fit(out, node.shape)
    if op == "mul":
        a, b = node.operands
        return _fit(_plus(_times(ts[0], b), _times(ts[1], a)), node.shape)
    if op == "div":
        a, b = node.operands
        num = ts[0]
        if ts[1] is not None:
            num = _plus(num, -(node * ts[1]))
        return _fit(num / b, node.shape)
    t = ts[0]
    if op == "neg":
        return -t
    if op == "pow":
        p = node.params["p"]
        if p == 0:
            return None
        if p == 1:
            return t
        return t * (p * C.power(x, p - 1))
    if op == "sin":
        return t * C.cos(x)
    if op == "cos":
        return -(t * C.sin(x))
    if op == "exp":
        return t * node
    if op == "log":
        return t / x
    if op == "tanh":
        return t * (1.0 - node * node)
    if op == "sqrt":
        return t * (0.5 / node)
    if op == "abs":
        return t * C.sign(x)
    if op == "sign":
        return None
    if op == "sigmoid":
        return t * (node * (1.0 - node))
    if op == "einsum":
        out = None
        for i, ti in enumerate(ts):
            if ti is None:
                continue
            ops = list(node.operands)
            ops[i] = ti
            out = _plus(out, C.einsum(node.params["spec"], *ops))
        return out
    if op == "stack":
        parts = [C.zeros(o.shape) if ti is None else ti for o, ti in zip(node.operands, ts)]
        return C.stack(parts, node.params["axis"])
    if op in ("sum", "trace", "index", "reshape", "broadcast_to", "transpose"):
        return C.with_children(node, [t])
    raise MissingRule(f"no derivative rule for op {op!r}")


def _arg_shapes(e: Expr, arg_shapes: Optional[Sequence[TensorShape]] = None) -> Dict[int, TensorShape]:
    shapes = {n.params["index"]: n.shape for n in C.topo_order([e]) if n.op == "arg"}
    if arg_shapes is not None:
        for i, s in enumerate(arg_shapes):
            s = tuple(s)
            if i in shapes and shapes[i] != s:
                raise ShapeMismatch(f"argument {i} is used as {format_shape(shapes[i])}, declared {format_shape(s)}")
            shapes[i] = s
    return shapes


def linearize_expr(e: Expr, arg_shapes: Sequence[TensorShape]) -> Expr:
    """``(x_0..x_{n-1}, dx_0..dx_{n-1}) -> J(x) dx`` as one Expr."""
    n = len(arg_shapes)
    shapes = [tuple(s) for s in arg_shapes]

    def leaf(node):
        if node.op == "arg":
            i = node.params["index"]
            return C.arg(n + i, shapes[i])
        return None

    return jvp_exprs([e], leaf)[0]


def jacobian(e: Expr, argnum: int, arg_shapes: Optional[Sequence[TensorShape]] = None) -> Expr:
    """Jacobian of ``e`` w.r.t. argument ``argnum``: shape ``e.shape + arg_shape``.

    Built from one forward pass per basis direction of the argument.
    """
    shapes = _arg_shapes(e, arg_shapes)
    if argnum < 0 or (arg_shapes is not None and argnum >= len(arg_shapes)):
        raise IndexOutOfRange(f"argnum {argnum} out of range")
    if argnum not in shapes:
        if arg_shapes is None:
            raise ShapeMismatch(f"argument {argnum} is unused; pass arg_shapes to fix its shape")
    ashape = shapes[argnum]
    m = math.prod(ashape)
    cols = []
    for j in range(m):
        basis = np.zeros(m)
        basis[j] = 1.0
        direction = C.const(basis.reshape(ashape))

        def leaf(node, direction=direction):
            if node.op == "arg" and node.params["index"] == argnum:
                return direction
            return None

        cols.append(jvp_exprs([e], leaf)[0])
    stacked = C.stack(cols, axis=e.rank)
    return C.reshape(stacked, e.shape + ashape)


@dataclass
class DualValue:
    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if np.shape(self.primal) != np.shape(self.tangent):
            raise ShapeMismatch(f"primal {np.shape(self.primal)} and tangent {np.shape(self.tangent)} differ")


def jvp1(e: Expr, primals: Sequence, tangents: Sequence, params: "dict | None" = None) -> DualValue:
    """Evaluate ``e`` and its Jacobian-vector product at ``primals`` along ``tangents``."""
    if len(primals) != len(tangents):
        raise ShapeMismatch("need one tangent per primal argument")
    shapes = _arg_shapes(e)
    arg_shapes = [shapes.get(i, np.shape(p)) for i, p in enumerate(primals)]
    lin = linearize_expr(e, arg_shapes)
    vals = list(primals) + list(tangents)
    p, t = C.evaluate_many([e, lin], vals, arg_shapes + arg_shapes, params)
    p, t = np.broadcast_arrays(p, t)
    return DualValue(np.array(p), np.array(t))


# ---------------------------------------------------------------------------
# linearity classification
# ---------------------------------------------------------------------------

INDEPENDENT, LINEAR, NONLINEAR = 0, 1, 2

_LINEAR_UNARY = ("neg", "sum", "trace", "index", "reshape", "broadcast_to", "transpose")


def classify(roots: Sequence[Expr], is_var: Callable[[Expr], bool]) -> List[int]:
    """Conservative dependence class of each root on the leaves selected by ``is_var``.

    ``LINEAR`` means homogeneous linear jointly in all selected leaves: a sum of
    their values scaled by factors that do not depend on them.
    """
    cat: Dict[int, int] = {}
    for node in C.topo_order(roots):
        cat[id(node)] = _classify_node(node, cat, is_var)
    return [cat[id(r)] for r in roots]


def _classify_node(node: Expr, cat, is_var) -> int:
    op = node.op
    if op in ("arg", "param", "bound"):
        return LINEAR if is_var(node) else INDEPENDENT
    if op == "const":
        return LINEAR if C.is_zero_const(node) else INDEPENDENT
    if op == "gridsum":
        return cat[id(node.params["body"])]
    cs = [cat[id(o)] for o in node.operands]
    if op in ("add", "sub", "stack"):
        zero_ok = [LINEAR if (c == INDEPENDENT and C.is_zero_const(o)) else c for c, o in zip(cs, node.operands)]
        if all(c == INDEPENDENT for c in cs):
            return INDEPENDENT
        return LINEAR if all(c == LINEAR for c in zero_ok) else NONLINEAR
    if op in _LINEAR_UNARY:
        return cs[0]
    if op == "pow" and node.params["p"] == 1:
        return cs[0]
    if op in ("mul", "einsum"):
        n_lin = sum(c == LINEAR for c in cs)
        if any(c == NONLINEAR for c in cs) or n_lin > 1:
            return NONLINEAR
        return LINEAR if n_lin == 1 else INDEPENDENT
    if op == "div":
        a, b = cs
        if b != INDEPENDENT:
            return NONLINEAR
        return a
    return INDEPENDENT if all(c == INDEPENDENT for c in cs) else NONLINEAR


def is_linear_in(e: Expr, argnums) -> bool:
    argnums = set(argnums)
    sel = lambda n: n.op == "arg" and n.params["index"] in argnums
    return classify([e], sel)[0] == LINEAR


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def backprop(roots: Sequence[Expr], cotangents: Sequence[Expr], is_wrt: Callable[[Expr], bool]) -> Dict[Expr, Expr]:
    """Reverse sweep from ``roots`` seeded with ``cotangents``.

    Returns ``{leaf: cotangent expression}`` for every leaf selected by
    ``is_wrt`` that the roots depend on.  Gridsums on a differentiated path
    are not supported here (``MissingRule``).
    """
    order = C.topo_order(roots)
    live: set = set()
    for node in order:
        if node.op in ("arg", "param") and is_wrt(node):
            live.add(id(node))
        elif any(id(c) in live for c in node.children()):
            live.add(id(node))
    ct: Dict[int, Optional[Expr]] = {}
    for r, c in zip(roots, cotangents):
        if c.shape != r.shape:
            raise ShapeMismatch(f"cotangent {format_shape(c.shape)} for output {format_shape(r.shape)}")
        if id(r) in live:
            ct[id(r)] = _plus(ct.get(id(r)), c)
    result: Dict[Expr, Expr] = {}
    for node in reversed(order):
        c = ct.pop(id(node), None)
        if c is None or id(node) not in live:
            continue
        if node.op in ("arg", "param"):
            prev = result.get(node)
            result[node] = c if prev is None else prev + c
            continue
        if node.op == "gridsum":
            raise MissingRule("reverse sweep through a quadrature sum")
        for operand, oc in _vjp_node(node, c, live):
            if oc is not None:
                ct[id(operand)] = _plus(ct.get(id(operand)), oc)
    return result


def _vjp_node(node: Expr, c: Expr, live):
    op = node.op
    ops = node.operands
    want = [id(o) in live for o in ops]
    if op == "add":
        return [(o, _unbroadcast(c, o.shape) if w else None) for o, w in zip(ops, want)]
    if op == "sub":
        a, b = ops
        return [(a, _unbroadcast(c, a.shape) if want[0] else None),
                (b, _unbroadcast(-c, b.shape) if want[1] else None)]
    if op == "mul":
        a, b = ops
        return [(a, _unbroadcast(c * b, a.shape) if want[0] else None),
                (b, _unbroadcast(c * a, b.shape) if want[1] else None)]
    if op == "div":
        a, b = ops
        return [(a, _unbroadcast(c / b, a.shape) if want[0] else None),
                (b, _unbroadcast(-(c * node) / b, b.shape) if want[1] else None)]
    x = ops[0]
    if op == "neg":
        return [(x, -c)]
    if op == "pow":
        p = node.params["p"]
        if p == 0:
            return []
        return [(x, c if p == 1 else c * (p * C.power(x, p - 1)))]
    simple = {
        "sin": lambda: c * C.cos(x),
        "cos": lambda: -(c * C.sin(x)),
        "exp": lambda: c * node,
        "log": lambda: c / x,
        "tanh": lambda: c * (1.0 - node * node),
        "sqrt": lambda: c * (0.5 / node),
        "abs": lambda: c * C.sign(x),
        "sigmoid": lambda: c * (node * (1.0 - node)),
    }
    if op in simple:
        return [(x, simple[op]())]
    if op == "sign":
        return []
    if op == "sum":
        axes = node.params["axes"]
        keep = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
        return [(x, C.broadcast_to(C.reshape(c, keep), x.shape))]
    if op == "trace":
        k = node.params["k"]
        grp = x.shape[x.rank - k:]
        m = math.prod(grp)
        eye = C.const(np.eye(m).reshape(grp + grp))
        return [(x, C.outer(c, eye))]
    if op == "einsum":
        return [(o, _einsum_vjp(node, c, i)) for i, o in enumerate(ops) if want[i]]
    if op == "index":
        axis, i = node.params["axis"], node.params["i"]
        parts = [c if j == i else C.zeros(c.shape) for j in range(x.shape[axis])]
        return [(x, C.stack(parts, axis))]
    if op == "stack":
        axis = node.params["axis"]
        return [(o, C.index(c, j, axis)) for j, o in enumerate(ops) if want[j]]
    if op == "reshape":
        return [(x, C.reshape(c, x.shape))]
    if op == "broadcast_to":
        if x.rank == 0:
            return [(x, C.sum_axes(c))]
        axes = tuple(i for i, (d, t) in enumerate(zip(x.shape, node.shape)) if d != t)
        return [(x, C.reshape(C.sum_axes(c, axes), x.shape) if axes else c)]
    if op == "transpose":
        perm = node.params["perm"]
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return [(x, C.transpose(c, inv))]
    raise MissingRule(f"no reverse rule for op {op!r}")


def _einsum_vjp(node: Expr, c: Expr, i: int) -> Expr:
    ins, out = node.params["spec"].split("->")
    ins = ins.split(",")
    target = ins[i]
    if len(set(target)) != len(target):
        raise MissingRule("reverse rule for an einsum operand with repeated indices")
    others = [(s, o) for j, (s, o) in enumerate(zip(ins, node.operands)) if j != i]
    avail = set(out).union(*[set(s) for s, _ in others]) if others else set(out)
    keep = "".join(ch for ch in target if ch in avail)
    spec = ",".join([out] + [s for s, _ in others]) + "->" + keep
    val = C.einsum(spec, c, *[o for _, o in others])
    x = node.operands[i]
    if keep != target:
        inter = tuple(x.shape[target.index(ch)] if ch in keep else 1 for ch in target)
        val = C.broadcast_to(C.reshape(val, inter), x.shape)
    return val


def grad(e: Expr, wrt_params: Sequence[str] = (), wrt_args: Sequence[int] = ()) -> Dict:
    """Gradients of a scalar Expr w.r.t. named parameters and/or arguments.

    Returns ``{name or index: Expr}``; unused leaves get zero expressions when
    their shape is known.
    """
    if e.shape != ():
        raise ShapeMismatch(f"grad needs a scalar expression, got {format_shape(e.shape)}")
    names, idx = set(wrt_params), set(wrt_args)

    def sel(n):
        return (n.op == "param" and n.params["name"] in names) or (n.op == "arg" and n.params["index"] in idx)

    raw = backprop([e], [C.const(1.0)], sel)
    out: Dict = {}
    for leaf, g in raw.items():
        key = leaf.params["name"] if leaf.op == "param" else leaf.params["index"]
        out[key] = g if key not in out else out[key] + g
    shapes = C.param_names([e])
    for name in names:
        if name not in out and name in shapes:
            out[name] = C.zeros(shapes[name])
    return out


def transpose_expr(e: Expr, argnum: int, arg_shapes: Sequence[TensorShape], ct_index: int) -> Expr:
    """Adjoint of ``x_argnum -> e`` as an Expr of the other arguments and a
    cotangent read from ``arg(ct_index)``.

    Raises :class:`NotLinear` unless ``e`` is provably linear in that argument.
    """
    if not 0 <= argnum < len(arg_shapes):
        raise IndexOutOfRange(f"argnum {argnum} out of range for {len(arg_shapes)} arguments")
    if not is_linear_in(e, [argnum]):
        raise NotLinear(f"expression is not linear in argument {argnum}")
    xshape = tuple(arg_shapes[argnum])
    y = C.arg(ct_index, e.shape)
    sel = lambda n: n.op == "arg" and n.params["index"] == argnum
    try:
        res = backprop([e], [y], sel)
        total = None
        for g in res.values():
            total = _plus(total, g)
        return C.zeros(xshape) if total is None else total
    except MissingRule:
        # contract the cotangent against the (argument-independent) Jacobian
        jac = jacobian(e, argnum, arg_shapes)
        jac = C.substitute([jac], args={argnum: C.zeros(xshape)})[0]
        return C.dot(y, jac, k=e.rank)


def transpose1(e: Expr, argnum: int, arg_shapes: Optional[Sequence[TensorShape]] = None) -> Expr:
    """Transpose w.r.t. ``argnum``.  The result takes the remaining arguments in
    their original order followed by the cotangent."""
    shapes_map = _arg_shapes(e, arg_shapes)
    n = len(arg_shapes) if arg_shapes is not None else (max(shapes_map) + 1 if shapes_map else 0)
    if argnum >= n or argnum < 0:
        raise IndexOutOfRange(f"argnum {argnum} out of range")
    shapes = []
    for i in range(n):
        if i not in shapes_map:
            raise ShapeMismatch(f"argument {i} is unused; pass arg_shapes to fix its shape")
        shapes.append(shapes_map[i])
    t = transpose_expr(e, argnum, shapes, ct_index=n)
    remap = {}
    for i in range(n):
        if i == argnum:
            continue
        j = i if i < argnum else i - 1
        if j != i:
            remap[i] = C.arg(j, shapes[i])
    remap[n] = C.arg(n - 1, e.shape)
    return C.substitute([t], args=remap)[0]
