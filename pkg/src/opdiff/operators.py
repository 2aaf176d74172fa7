"""Functions as values and the operators that act on them.

A :class:`FunctionValue` is an immutable graph node with a static
:class:`~opdiff.signature.FunctionSignature`.  Leaves wrap a pointwise
:class:`~opdiff.engine.Expr`; interior nodes apply one of the operator
primitives: ``compose``, ``nabla``, ``linearize``, ``linear_transpose``,
``integrate``, ``permute_args``, ``zip`` and ``broadcast``.

Linearity is tracked by construction.  ``linear_groups`` lists the sets of
argument positions in which the function is jointly linear (homogeneous);
``linear_flags[i]`` is true when ``{i}`` alone is such a set.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from . import memo
from .errors import (
    ArityMismatch, IndexOutOfRange, InvalidPermutation, NotLinear, ShapeMismatch, UnboundVariable,
)
from .quadrature import Grid
from .signature import (
    FunctionSignature, TensorShape, as_signature, check_compose, format_shape, nabla_signature,
)

_EXACT_SUBSETS = 6
_var_ids = itertools.count()


def _token(v) -> str:
    if isinstance(v, Grid):
        return "grid:" + v.digest
    if isinstance(v, E.Expr):
        return "expr:" + v.digest
    if isinstance(v, (tuple, list)):
        return "(" + ",".join(_token(x) for x in v) + ")"
    return repr(v)


class FunctionValue:
    """A function of one or more tensor arguments, usable as a value.

    Call it with arrays (leading dims are batch dims) to evaluate.  A function
    with no arguments is a *functional value*: the tensor left after every
    argument was integrated out; ``float()`` works on scalar ones.
    """

    __slots__ = ("kind", "signature", "operands", "params", "expr", "linear_groups", "used",
                 "is_zero", "id", "_lowered", "__weakref__")

    def __init__(self, kind: str, signature: FunctionSignature, operands: Sequence["FunctionValue"] = (),
                 params: Optional[dict] = None, expr: Optional[E.Expr] = None,
                 linear_groups: FrozenSet[FrozenSet[int]] = frozenset(), used: FrozenSet[int] = frozenset(),
                 is_zero: bool = False):
        self.kind = kind
        self.signature = signature
        self.operands = tuple(operands)
        self.params = dict(params or {})
        self.expr = expr
        self.linear_groups = frozenset(frozenset(g) for g in linear_groups)
        self.used = frozenset(used)
        self.is_zero = bool(is_zero)
        self._lowered = None
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{kind}|{signature}".encode())
        for k in sorted(self.params):
            h.update(f"|{k}={_token(self.params[k])}".encode())
        if expr is not None:
            h.update(b"|expr=" + expr.digest.encode())
        for o in self.operands:
            h.update(b"#" + o.id.encode())
        self.id = h.hexdigest()

    # -- shape and linearity ------------------------------------------------
    @property
    def arity(self) -> int:
        return self.signature.arity

    @property
    def args(self) -> Tuple[TensorShape, ...]:
        return self.signature.args

    @property
    def ret(self) -> TensorShape:
        return self.signature.ret

    def linear_in(self, positions) -> bool:
        """True when provably jointly linear in the given argument positions."""
        s = frozenset(positions) & self.used
        if not s:
            return self.is_zero
        return s in self.linear_groups

    @property
    def linear_flags(self) -> Tuple[bool, ...]:
        return tuple(self.linear_in({i}) for i in range(self.arity))

    def __repr__(self) -> str:
        return f"FunctionValue({self.kind}, {self.signature}, {self.id[:8]})"

    # -- evaluation ---------------------------------------------------------
    def __call__(self, *args):
        if len(args) != self.arity:
            raise ArityMismatch(f"{self.signature} takes {self.arity} arguments, got {len(args)}")
        vals = []
        for i, (a, s) in enumerate(zip(args, self.args)):
            a = np.asarray(a, dtype=np.float64)
            if a.ndim < len(s) or a.shape[a.ndim - len(s):] != s:
                raise ShapeMismatch(f"argument {i} has shape {a.shape}, {self.signature} expects trailing {format_shape(s)}")
            vals.append(a)
        batch = np.broadcast_shapes(*[a.shape[: a.ndim - len(s)] for a, s in zip(vals, self.args)]) if vals else ()
        if memo.current_session() is None:
            with memo.session():
                out = _evaluate(self, vals)
        else:
            out = _evaluate(self, vals)
        out = tuple(np.array(np.broadcast_to(o, batch + r)) for o, r in zip(out, self.signature.rets))
        return out if self.signature.is_multi_return else out[0]

    def __float__(self) -> float:
        if self.arity or self.signature.rets != ((),):
            raise TypeError(f"only scalar functional values convert to float, not {self.signature}")
        return float(self())

    def lowered(self) -> Tuple[E.Expr, ...]:
        """Pointwise Expr(s) computing this function (one per return)."""
        if self._lowered is None:
            self._lowered = tuple(_LOWER[self.kind](self))
        return self._lowered

    # -- sugar ----------------------------------------------------------------
    def __add__(self, other):
        return _pointwise2("add", self, other)

    def __radd__(self, other):
        return _pointwise2("add", other, self)

    def __sub__(self, other):
        return _pointwise2("sub", self, other)

    def __rsub__(self, other):
        return _pointwise2("sub", other, self)

    def __mul__(self, other):
        return _pointwise2("mul", self, other)

    def __rmul__(self, other):
        return _pointwise2("mul", other, self)

    def __truediv__(self, other):
        return _pointwise2("div", self, other)

    def __rtruediv__(self, other):
        return _pointwise2("div", other, self)

    def __neg__(self):
        return apply(E.neg, self)

    def __pow__(self, p):
        return apply(lambda x: E.power(x, p), self)

    def __getitem__(self, i):
        return apply(lambda x: E.index(x, i), self)


# ---------------------------------------------------------------------------
# linearity bookkeeping
# ---------------------------------------------------------------------------

def _candidates(used: FrozenSet[int]) -> List[FrozenSet[int]]:
    items = sorted(used)
    if len(items) <= _EXACT_SUBSETS:
        return [frozenset(c) for r in range(1, len(items) + 1) for c in itertools.combinations(items, r)]
    singles = [frozenset((i,)) for i in items]
    return singles + [frozenset(items)]


def _leaf_linearity(expr: E.Expr, arity: int) -> Tuple[frozenset, frozenset]:
    used = frozenset(i for i in E.core.arg_indices([expr]) if i < arity)
    groups = []
    for s in _candidates(used):
        sel = lambda n, s=s: n.op == "arg" and n.params["index"] in s
        if E.classify([expr], sel)[0] == E.ad.LINEAR:
            groups.append(s)
    return frozenset(groups), used


# ---------------------------------------------------------------------------
# leaves
# ---------------------------------------------------------------------------

def from_expr(expr: E.Expr, arg_shapes: Sequence[TensorShape]) -> FunctionValue:
    """Wrap a pointwise Expr whose ``arg(i)`` leaves are the function's arguments."""
    arg_shapes = tuple(tuple(s) for s in arg_shapes)
    for n in E.topo_order([expr]):
        if n.op == "arg":
            i = n.params["index"]
            if i >= len(arg_shapes):
                raise ArityMismatch(f"expression reads argument {i} of a {len(arg_shapes)}-argument function")
            if n.shape != arg_shapes[i]:
                raise ShapeMismatch(f"argument {i} used as {format_shape(n.shape)}, declared {format_shape(arg_shapes[i])}")
    if expr.free_bound:
        raise ValueError("leaf expression has an unbound quadrature variable")
    groups, used = _leaf_linearity(expr, len(arg_shapes))
    sig = FunctionSignature((expr.shape,), arg_shapes)
    return FunctionValue("leaf", sig, expr=expr, linear_groups=groups, used=used,
                         is_zero=E.core.is_zero_const(expr))


def function(fn: Callable, signature) -> FunctionValue:
    """Trace a Python callable on Expr placeholders, e.g.
    ``function(lambda x: E.sin(x), "F[f[],f[]]")``."""
    sig = as_signature(signature)
    xs = [E.arg(i, s) for i, s in enumerate(sig.args)]
    out = E.as_expr(fn(*xs))
    if out.shape != sig.ret:
        if out.shape == ():
            out = E.broadcast_to(out, sig.ret)
        else:
            raise ShapeMismatch(f"traced function returns {format_shape(out.shape)}, signature says {format_shape(sig.ret)}")
    return from_expr(out, sig.args)


def constant(value, arg_shapes: Sequence[TensorShape] = ((),)) -> FunctionValue:
    return from_expr(E.const(value), arg_shapes)


def zeros_like(f: FunctionValue) -> FunctionValue:
    """The zero function with ``f``'s signature (single-return only)."""
    return constant(np.zeros(f.ret), f.args)


def identity(shape=()) -> FunctionValue:
    return from_expr(E.arg(0, shape), [tuple(shape)])


def projection(arg_shapes: Sequence[TensorShape], k: int) -> FunctionValue:
    """``(x_0, ..., x_n) -> x_k``."""
    arg_shapes = [tuple(s) for s in arg_shapes]
    if not 0 <= k < len(arg_shapes):
        raise IndexOutOfRange(f"projection index {k} out of range")
    return from_expr(E.arg(k, arg_shapes[k]), arg_shapes)


def var(signature, name: str = "", like: Optional[FunctionValue] = None) -> FunctionValue:
    """Placeholder function used while tracing operator programs.

    With ``like`` given the placeholder inherits that function's linearity;
    otherwise it is assumed to use every argument and be linear in none.
    """
    sig = as_signature(signature)
    groups = like.linear_groups if like is not None else frozenset()
    used = like.used if like is not None else frozenset(range(sig.arity))
    return FunctionValue("var", sig, params={"uid": next(_var_ids), "name": name},
                         linear_groups=groups, used=used)


# ---------------------------------------------------------------------------
# the operator primitives
# ---------------------------------------------------------------------------

def _as_fv_list(gs) -> List[FunctionValue]:
    if isinstance(gs, FunctionValue):
        return [gs]
    return list(gs)


def compose(f: FunctionValue, gs) -> FunctionValue:
    """``x -> f(g_0(x), g_1(x), ...)``; multi-return inners feed consecutive slots."""
    gs = _as_fv_list(gs)
    sig = check_compose(f.signature, [g.signature for g in gs])
    slot_of: List[List[int]] = []
    pos = 0
    for g in gs:
        k = len(g.signature.rets)
        slot_of.append(list(range(pos, pos + k)))
        pos += k
    feeding = [any(s in f.used for s in slots) for slots in slot_of]
    used = frozenset().union(*[g.used if fd else frozenset() for g, fd in zip(gs, feeding)])
    groups = []
    for s in _candidates(used):
        dep = [bool(s & g.used) for g in gs]
        ok = all(g.linear_in(s) for g, d in zip(gs, dep) if d)
        fed = frozenset(x for slots, d in zip(slot_of, dep) if d for x in slots)
        if ok and fed and f.linear_in(fed):
            groups.append(s)
    return FunctionValue("compose", sig, [f] + gs, linear_groups=groups, used=used, is_zero=f.is_zero)


def nabla(f: FunctionValue, argnum: int = 0) -> FunctionValue:
    """Derivative function w.r.t. ``args[argnum]``: ``ret`` grows by that argument's dims."""
    sig = nabla_signature(f.signature, argnum)
    groups = [g for g in f.linear_groups if argnum not in g]
    return FunctionValue("nabla", sig, [f], {"argnum": int(argnum)}, linear_groups=groups,
                         used=f.used, is_zero=f.is_zero)


def linearize(f: FunctionValue) -> FunctionValue:
    """``(x, dx) -> J_f(x) dx`` with one tangent slot per argument."""
    if f.signature.is_multi_return:
        raise ShapeMismatch(f"linearize needs a single-return function, got {f.signature}")
    n = f.arity
    tangents = frozenset(n + i for i in f.used)
    sig = FunctionSignature(f.signature.rets, f.args + f.args)
    groups = [tangents] if tangents else []
    return FunctionValue("linearize", sig, [f], linear_groups=groups, used=f.used | tangents, is_zero=f.is_zero)


def _group_for(f: FunctionValue, argnum: int) -> Optional[FrozenSet[int]]:
    if argnum not in f.used:
        return frozenset((argnum,)) if f.is_zero else None
    best = None
    for g in f.linear_groups:
        if argnum in g and (best is None or len(g) < len(best)):
            best = g
    return best


def linear_transpose(f: FunctionValue, argnum: int = 0, zero: Sequence[int] = ()) -> FunctionValue:
    """Adjoint of ``x_argnum -> f(..., x_argnum, ...)`` under the Euclidean pairing.

    The remaining arguments are carried along first; the cotangent comes last.
    When ``f`` is only jointly linear in a group of slots, the other members
    of that group (or the slots listed in ``zero``) are treated as zero.
    """
    if not 0 <= argnum < f.arity:
        raise IndexOutOfRange(f"argnum {argnum} out of range for {f.signature}")
    ret = f.ret
    zero = tuple(sorted(set(int(z) for z in zero) - {argnum}))
    if zero:
        if not f.linear_in(set(zero) | {argnum}):
            raise NotLinear(f"{f.signature} is not provably linear in arguments {sorted(set(zero) | {argnum})}")
    elif _group_for(f, argnum) is None:
        raise NotLinear(f"{f.signature} is not provably linear in argument {argnum}")
    rest = tuple(a for i, a in enumerate(f.args) if i != argnum)
    sig = FunctionSignature((f.args[argnum],), rest + (ret,))
    y = len(rest)
    params = {"argnum": int(argnum)}
    if zero:
        params["zero"] = zero
    return FunctionValue("linear_transpose", sig, [f], params,
                         linear_groups=[frozenset((y,))], used=frozenset(range(len(rest) + 1)),
                         is_zero=f.is_zero)


def _drop_index(s: FrozenSet[int], k: int) -> FrozenSet[int]:
    return frozenset(i if i < k else i - 1 for i in s if i != k)


def integrate(f: FunctionValue, grid: Grid, argnum: int = 0) -> FunctionValue:
    """Quadrature over ``args[argnum]``: ``sum_j w_j f(..., p_j, ...)``.

    Integrating the last argument leaves a functional value (no arguments).
    """
    if not 0 <= argnum < f.arity:
        raise IndexOutOfRange(f"argnum {argnum} out of range for {f.signature}")
    if grid.point_shape != f.args[argnum]:
        raise ShapeMismatch(
            f"grid points are {format_shape(grid.point_shape)} but argument {argnum} of {f.signature} is {format_shape(f.args[argnum])}")
    rest = tuple(a for i, a in enumerate(f.args) if i != argnum)
    sig = FunctionSignature(f.signature.rets, rest)
    groups = [_drop_index(g, argnum) for g in f.linear_groups if argnum not in g]
    return FunctionValue("integrate", sig, [f], {"argnum": int(argnum), "grid": grid},
                         linear_groups=groups, used=_drop_index(f.used, argnum), is_zero=f.is_zero)


def permute_args(f: FunctionValue, perm: Sequence[int]) -> FunctionValue:
    """``(a_0, ..., a_n) -> f(a_perm[0], ..., a_perm[n])``."""
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(f.arity)):
        raise InvalidPermutation(f"{perm} is not a permutation of {f.arity} arguments")
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    sig = FunctionSignature(f.signature.rets, tuple(f.args[inv[j]] for j in range(f.arity)))
    remap = lambda s: frozenset(perm[i] for i in s)
    return FunctionValue("permute_args", sig, [f], {"perm": perm},
                         linear_groups=[remap(g) for g in f.linear_groups], used=remap(f.used), is_zero=f.is_zero)


def zip_functions(f: FunctionValue, g: FunctionValue) -> FunctionValue:
    """``(x, y) -> (f(x), g(y))``: arguments concatenate, returns stack up."""
    sig = FunctionSignature(f.signature.rets + g.signature.rets, f.args + g.args)
    n = f.arity
    fg = list(f.linear_groups) + ([frozenset()] if f.is_zero else [])
    gg = [frozenset(i + n for i in s) for s in g.linear_groups] + ([frozenset()] if g.is_zero else [])
    groups = {a | b for a in fg for b in gg if a | b}
    used = f.used | frozenset(i + n for i in g.used)
    return FunctionValue("zip", sig, [f, g], linear_groups=groups, used=used, is_zero=f.is_zero and g.is_zero)


def pack(fs: Sequence[FunctionValue]) -> FunctionValue:
    """``x -> (f_0(x), f_1(x), ...)``: a multi-return function of shared arguments."""
    fs = list(fs)
    if not fs:
        raise ArityMismatch("pack needs at least one function")
    args = fs[0].args
    for f in fs[1:]:
        if f.args != args:
            raise ShapeMismatch(f"packed functions must share arguments: {f.signature} vs {fs[0].signature}")
    if len(fs) == 1:
        return fs[0]
    sig = FunctionSignature(tuple(r for f in fs for r in f.signature.rets), args)
    used = frozenset().union(*[f.used for f in fs])
    groups = [s for s in _candidates(used) if all(f.linear_in(s) for f in fs)]
    return FunctionValue("pack", sig, fs, linear_groups=groups, used=used, is_zero=all(f.is_zero for f in fs))


def unpack(f: FunctionValue) -> List[FunctionValue]:
    """Single-return pieces of a (possibly multi-return) function."""
    rets = f.signature.rets
    if len(rets) == 1:
        return [f]
    return [compose(from_expr(E.arg(j, r), rets), [f]) for j, r in enumerate(rets)]


def broadcast_fn(f: FunctionValue, extra_args: Sequence[TensorShape], positions: Sequence[int],
                 grid: "Grid | Sequence[Grid] | None" = None) -> FunctionValue:
    """Insert ignored arguments: ``extra_args[i]`` lands at result position ``positions[i]``.

    ``grid`` (one per inserted argument) is optional; it is only consulted when
    the operation is transposed, which integrates the inserted arguments away.
    """
    extra_args = [tuple(s) for s in extra_args]
    positions = [int(p) for p in positions]
    if len(extra_args) != len(positions):
        raise ArityMismatch("one position per inserted argument")
    total = f.arity + len(positions)
    if len(set(positions)) != len(positions) or any(not 0 <= p < total for p in positions):
        raise IndexOutOfRange(f"insert positions {positions} invalid for {total} arguments")
    order = sorted(range(len(positions)), key=lambda i: positions[i])
    positions = [positions[i] for i in order]
    extra_args = [extra_args[i] for i in order]
    mapping = [j for j in range(total) if j not in positions]
    args = [None] * total
    for j, s in zip(positions, extra_args):
        args[j] = s
    for i, j in enumerate(mapping):
        args[j] = f.args[i]
    grids = None
    if grid is not None:
        grids = [grid] if isinstance(grid, Grid) else list(grid)
        grids = tuple(grids[i] for i in order)
        if len(grids) != len(positions):
            raise ArityMismatch("one grid per inserted argument")
    remap = lambda s: frozenset(mapping[i] for i in s)
    sig = FunctionSignature(f.signature.rets, tuple(args))
    params = {"positions": tuple(positions), "mapping": tuple(mapping)}
    if grids is not None:
        params["grids"] = grids
    return FunctionValue("broadcast", sig, [f], params, linear_groups=[remap(g) for g in f.linear_groups],
                         used=remap(f.used), is_zero=f.is_zero)


def broadcast_to_args(f: FunctionValue, arg_shapes: Sequence[TensorShape], positions: Sequence[int]) -> FunctionValue:
    """Place ``f``'s arguments at ``positions`` of a longer argument list."""
    arg_shapes = [tuple(s) for s in arg_shapes]
    positions = list(positions)
    extra = [j for j in range(len(arg_shapes)) if j not in positions]
    if positions != sorted(positions):
        raise InvalidPermutation("positions must be increasing")
    return broadcast_fn(f, [arg_shapes[j] for j in extra], extra)


# ---------------------------------------------------------------------------
# derived operators and sugar
# ---------------------------------------------------------------------------

def apply(fn: Callable, *fs, ret=None) -> FunctionValue:
    """Pointwise ``x -> fn(f_0(x), f_1(x), ...)`` for an Expr-level callable ``fn``."""
    fs = _align([_as_function(f) for f in fs])
    shapes = [r for f in fs for r in f.signature.rets]
    xs = [E.arg(i, s) for i, s in enumerate(shapes)]
    out = E.as_expr(fn(*xs))
    return compose(from_expr(out, shapes), fs)


def _as_function(f):
    if isinstance(f, FunctionValue):
        return f
    return ("const", f)


def _align(items) -> List[FunctionValue]:
    funcs = [f for f in items if isinstance(f, FunctionValue)]
    if not funcs:
        raise TypeError("pointwise operations need at least one function value")
    target = max(funcs, key=lambda f: f.arity).args
    out = []
    for f in items:
        if not isinstance(f, FunctionValue):
            out.append(constant(f[1], target))
        elif f.args != target:
            if f.arity == 0:
                out.append(broadcast_fn(f, target, list(range(len(target)))))
            else:
                raise ShapeMismatch(f"pointwise operands take different arguments: {f.signature} vs args {target}")
        else:
            out.append(f)
    return out


def _pointwise2(op: str, a, b) -> FunctionValue:
    fn = {"add": E.add, "sub": E.sub, "mul": E.mul, "div": E.div}[op]
    if not isinstance(a, FunctionValue):
        c = a
        return apply(lambda x: fn(c, x), b)
    if not isinstance(b, FunctionValue):
        c = b
        return apply(lambda x: fn(x, c), a)
    return apply(fn, a, b)


def _unary(op):
    efn = getattr(E, op)

    def lifted(f):
        if isinstance(f, FunctionValue):
            return apply(efn, f)
        return efn(f)

    lifted.__name__ = op
    lifted.__doc__ = f"Pointwise {op} of a function value (or of an Expr)."
    return lifted


sin = _unary("sin")
cos = _unary("cos")
exp = _unary("exp")
log = _unary("log")
tanh = _unary("tanh")
sqrt = _unary("sqrt")
sigmoid = _unary("sigmoid")


def dot(f: FunctionValue, g: FunctionValue) -> FunctionValue:
    return apply(lambda a, b: E.sum_axes(a * b) if a.shape else a * b, f, g)


def divergence(f: FunctionValue, argnum: int = 0) -> FunctionValue:
    """``trace(nabla(f))``: for a vector field ``R^n -> R^n`` the usual divergence."""
    d = nabla(f, argnum)
    k = len(f.args[argnum])
    if k == 0:
        return d
    return apply(lambda j: E.trace(j, k), d)


def integral_transform(kernel: FunctionValue, f: FunctionValue, grid: Grid) -> FunctionValue:
    """``x -> sum_j w_j k(x, y_j) f(y_j)``; ``kernel`` takes ``(x, y)``, ``f`` takes ``y``."""
    if kernel.arity != 2 or f.arity != 1 or kernel.args[1] != f.args[0]:
        raise ShapeMismatch(f"kernel {kernel.signature} cannot act on {f.signature}")
    fb = broadcast_fn(f, [kernel.args[0]], [0])
    return integrate(kernel * fb, grid, argnum=1)


# ---------------------------------------------------------------------------
# lowering to pointwise expressions
# ---------------------------------------------------------------------------

def _arg_exprs(f: FunctionValue) -> List[E.Expr]:
    return [E.arg(i, s) for i, s in enumerate(f.args)]


def _lower_leaf(f):
    return [f.expr]


def _lower_var(f):
    raise UnboundVariable(f"placeholder {f.params.get('name') or f.id[:8]} has no value")


def _lower_compose(f):
    outer, *inners = f.operands
    slots = [e for g in inners for e in g.lowered()]
    return E.substitute(list(outer.lowered()), args=dict(enumerate(slots)))


def _lower_nabla(f):
    g = f.operands[0]
    return [E.jacobian(g.lowered()[0], f.params["argnum"], g.args)]


def _lower_linearize(f):
    g = f.operands[0]
    return [E.linearize_expr(g.lowered()[0], g.args)]


def _lower_linear_transpose(f):
    g = f.operands[0]
    k = f.params["argnum"]
    e = g.lowered()[0]
    group = f.params.get("zero") or _group_for(g, k) or frozenset((k,))
    others = {i: E.zeros(g.args[i]) for i in group if i != k}
    if others:
        e = E.substitute([e], args=others)[0]
    return [E.transpose1(e, k, g.args)]


def _lower_integrate(f):
    g = f.operands[0]
    k = f.params["argnum"]
    grid = f.params["grid"]
    v = E.bound_var(g.args[k])
    remap = {k: v}
    for i, s in enumerate(g.args):
        if i > k:
            remap[i] = E.arg(i - 1, s)
    bodies = E.substitute(list(g.lowered()), args=remap)
    return [E.gridsum(b, v, grid) for b in bodies]


def _lower_permute(f):
    g = f.operands[0]
    perm = f.params["perm"]
    remap = {i: E.arg(perm[i], s) for i, s in enumerate(g.args)}
    return E.substitute(list(g.lowered()), args=remap)


def _lower_zip(f):
    a, b = f.operands
    n = a.arity
    shifted = E.substitute(list(b.lowered()), args={i: E.arg(i + n, s) for i, s in enumerate(b.args)})
    return list(a.lowered()) + shifted


def _lower_pack(f):
    return [e for g in f.operands for e in g.lowered()]


def _lower_broadcast(f):
    g = f.operands[0]
    mapping = f.params["mapping"]
    remap = {i: E.arg(mapping[i], s) for i, s in enumerate(g.args)}
    return E.substitute(list(g.lowered()), args=remap)


_LOWER = {
    "leaf": _lower_leaf,
    "var": _lower_var,
    "compose": _lower_compose,
    "nabla": _lower_nabla,
    "linearize": _lower_linearize,
    "linear_transpose": _lower_linear_transpose,
    "integrate": _lower_integrate,
    "permute_args": _lower_permute,
    "zip": _lower_zip,
    "broadcast": _lower_broadcast,
    "pack": _lower_pack,
}


# ---------------------------------------------------------------------------
# interpretive evaluation (memoized per session)
# ---------------------------------------------------------------------------

def _evaluate(f: FunctionValue, args: List[np.ndarray]) -> Tuple[np.ndarray, ...]:
    s = memo.current_session()
    cache = s.cache if s is not None else None
    key = None
    if cache is not None:
        key, hit = cache.lookup(f.id, args)
        if hit is not None:
            return hit
    if s is not None:
        s.calls[f.id] += 1
    out = tuple(_EVAL[f.kind](f, args))
    if cache is not None:
        cache.store(key, args, out)
    return out


def _eval_exprs(f, args):
    return E.core.evaluate_loose(list(f.lowered()), args)


def _eval_compose(f, args):
    outer, *inners = f.operands
    vals = [v for g in inners for v in _evaluate(g, args)]
    return _evaluate(outer, vals)


def _expand(a: np.ndarray, rank: int) -> np.ndarray:
    return np.expand_dims(a, a.ndim - rank)


def _eval_integrate(f, args):
    g = f.operands[0]
    k = f.params["argnum"]
    grid: Grid = f.params["grid"]
    rest = [_expand(a, len(s)) for a, s in zip(args, f.args)]
    inner = rest[:k] + [grid.points] + rest[k:]
    vals = _evaluate(g, inner)
    batch = np.broadcast_shapes(*[a.shape[: a.ndim - len(s)] for a, s in zip(inner, g.args)])
    out = []
    for v, r in zip(vals, g.signature.rets):
        v = np.broadcast_to(v, batch + r)
        w = grid.weights.reshape((-1,) + (1,) * len(r))
        out.append(np.sum(w * v, axis=-(len(r) + 1)))
    return out


def _eval_permute(f, args):
    g = f.operands[0]
    perm = f.params["perm"]
    return _evaluate(g, [args[perm[i]] for i in range(g.arity)])


def _eval_zip(f, args):
    a, b = f.operands
    return _evaluate(a, args[: a.arity]) + _evaluate(b, args[a.arity:])


def _eval_broadcast(f, args):
    g = f.operands[0]
    mapping = f.params["mapping"]
    return _evaluate(g, [args[j] for j in mapping])


_EVAL = {
    "leaf": _eval_exprs,
    "var": lambda f, args: _lower_var(f),
    "compose": _eval_compose,
    "nabla": _eval_exprs,
    "linearize": _eval_exprs,
    "linear_transpose": _eval_exprs,
    "integrate": _eval_integrate,
    "permute_args": _eval_permute,
    "zip": _eval_zip,
    "broadcast": _eval_broadcast,
    "pack": lambda f, args: tuple(v for g in f.operands for v in _evaluate(g, args)),
}


# ---------------------------------------------------------------------------
# graph utilities
# ---------------------------------------------------------------------------

def graph_nodes(roots) -> List[FunctionValue]:
    """Every distinct node reachable from ``roots``, operands before users."""
    roots = _as_fv_list(roots)
    seen, order = set(), []
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for o in reversed(node.operands):
            if o.id not in seen:
                stack.append((o, False))
    return order


def node_count(roots) -> int:
    return len(graph_nodes(roots))


def substitute(roots, mapping: Dict[str, FunctionValue]) -> List[FunctionValue]:
    """Rebuild ``roots`` with nodes replaced according to ``{node id: replacement}``."""
    roots = _as_fv_list(roots)
    new: Dict[str, FunctionValue] = {}
    for node in graph_nodes(roots):
        if node.id in mapping:
            repl = mapping[node.id]
            if repl.signature != node.signature:
                raise ShapeMismatch(f"replacement {repl.signature} for {node.signature}")
            new[node.id] = repl
        elif node.operands:
            ops = [new[o.id] for o in node.operands]
            new[node.id] = node if all(a is b for a, b in zip(ops, node.operands)) else rebuild(node, ops)
        else:
            new[node.id] = node
    return [new[r.id] for r in roots]


def bind_params(roots, values: Dict[str, np.ndarray]) -> List[FunctionValue]:
    """Replace named parameters inside leaf expressions by constants."""
    roots = _as_fv_list(roots)
    consts = {k: E.const(v) for k, v in values.items()}
    mapping = {}
    for node in graph_nodes(roots):
        if node.kind == "leaf" and E.core.param_names([node.expr]):
            expr = E.substitute([node.expr], params=consts)[0]
            mapping[node.id] = from_expr(expr, node.args)
    return substitute(roots, mapping) if mapping else roots


def rebuild(node: FunctionValue, ops: Sequence[FunctionValue]) -> FunctionValue:
    """Apply ``node``'s primitive to new operands."""
    p = node.params
    k = node.kind
    if k == "compose":
        return compose(ops[0], ops[1:])
    if k == "nabla":
        return nabla(ops[0], p["argnum"])
    if k == "linearize":
        return linearize(ops[0])
    if k == "linear_transpose":
        return linear_transpose(ops[0], p["argnum"], p.get("zero", ()))
    if k == "integrate":
        return integrate(ops[0], p["grid"], p["argnum"])
    if k == "permute_args":
        return permute_args(ops[0], p["perm"])
    if k == "zip":
        return zip_functions(ops[0], ops[1])
    if k == "pack":
        return pack(ops)
    if k == "broadcast":
        f = ops[0]
        positions = p["positions"]
        extra = [node.args[j] for j in positions]
        return broadcast_fn(f, extra, positions, p.get("grids"))
    raise ValueError(f"cannot rebuild {k!r}")


def _json_params(node: FunctionValue) -> dict:
    out = {}
    for k, v in node.params.items():
        if isinstance(v, Grid):
            out[k] = {"kind": v.kind, "n": v.n, "domain": [list(d) for d in v.domain]}
        elif isinstance(v, tuple) and v and isinstance(v[0], Grid):
            out[k] = [{"kind": g.kind, "n": g.n} for g in v]
        elif isinstance(v, (int, float, str)) or v is None:
            out[k] = v
        else:
            out[k] = list(v) if isinstance(v, tuple) else str(v)
    if node.kind == "leaf":
        out["expr_nodes"] = E.node_count([node.expr])
    return out


def graph_dict(roots) -> dict:
    """JSON-ready dump: ``{"roots": [...], "nodes": [{id, primitive, params, children, signature, linear_flags}]}``."""
    roots = _as_fv_list(roots)
    nodes = []
    for n in graph_nodes(roots):
        nodes.append({
            "id": n.id,
            "primitive": n.kind,
            "params": _json_params(n),
            "children": [o.id for o in n.operands],
            "signature": str(n.signature),
            "linear_flags": list(n.linear_flags),
        })
    return {"roots": [r.id for r in roots], "nodes": nodes}


def dump_graph(roots) -> str:
    return json.dumps(graph_dict(roots), indent=1)
