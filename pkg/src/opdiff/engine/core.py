"""Expression IR for pointwise tensor functions and its batched evaluator.

An :class:`Expr` is an immutable DAG node.  Leaves are constants, argument
references, named parameters and variables bound by a quadrature sum.
Every value flowing through evaluation has shape ``(*batch, *static)``:
the static part is the node's ``shape``; the batch part is any leading
dims, broadcast numpy-style and aligned from the right.  All primitive
implementations address static axes counting from the end, so one Expr
evaluates the same way at a single point or on a whole grid.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import math
from typing import Callable, Dict, Iterable, List, Sequence

import numpy as np

from ..errors import DomainError, ShapeMismatch
from ..signature import TensorShape, format_shape, tensor_shape

_STRICT = False


def set_strict(flag: bool) -> bool:
    """Toggle strict mode globally; returns the previous setting.

    Strict mode turns invalid operations (sqrt of a negative, 0/0, division by
    zero) into :class:`DomainError`.  Otherwise they poison results with NaN/inf.
    """
    global _STRICT
    prev, _STRICT = _STRICT, bool(flag)
    return prev


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict_mode(flag: bool = True):
    prev = set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


def _errstate():
    if _STRICT:
        return np.errstate(divide="raise", invalid="raise", over="ignore", under="ignore")
    return np.errstate(all="ignore")


_EMPTY: frozenset = frozenset()
_bound_ids = itertools.count()


def _token(value) -> str:
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value, dtype="<f8")
        return f"arr{arr.shape}:" + hashlib.blake2b(arr.tobytes(), digest_size=16).hexdigest()
    if isinstance(value, Expr):
        return value.digest
    if hasattr(value, "digest") and isinstance(getattr(value, "digest"), str):
        return value.digest
    if isinstance(value, (tuple, list)):
        return "(" + ",".join(_token(v) for v in value) + ")"
    return repr(value)


class Expr:
    """One node of a pointwise expression DAG."""

    __slots__ = ("op", "operands", "params", "shape", "digest", "free_bound", "__weakref__")

    def __init__(self, op: str, operands: Sequence["Expr"], params: dict, shape: TensorShape):
        self.op = op
        self.operands = tuple(operands)
        self.params = params
        self.shape = tensor_shape(shape)
        h = hashlib.blake2b(digest_size=16)
        h.update(op.encode())
        for k in sorted(params):
            h.update(f"|{k}={_token(params[k])}".encode())
        for o in self.operands:
            h.update(b"#" + o.digest.encode())
        self.digest = h.hexdigest()
        if op == "bound":
            self.free_bound = frozenset((params["token"],))
        elif op == "gridsum":
            self.free_bound = params["body"].free_bound - {params["var"].params["token"]}
        elif self.operands:
            fb = _EMPTY
            for o in self.operands:
                if o.free_bound:
                    fb = fb | o.free_bound
            self.free_bound = fb
        else:
            self.free_bound = _EMPTY

    @property
    def rank(self) -> int:
        return len(self.shape)

    def children(self) -> tuple:
        if self.op == "gridsum":
            return self.operands + (self.params["body"],)
        return self.operands

    def __repr__(self) -> str:
        return f"Expr({self.op}, {format_shape(self.shape)}, {self.digest[:8]})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return dot(self, other)

    def __getitem__(self, i):
        return index(self, i)


ExprLike = "Expr | float | int | np.ndarray"


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(x)


# ---------------------------------------------------------------------------
# leaves
# ---------------------------------------------------------------------------

def const(value) -> Expr:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return Expr("const", (), {"value": arr}, arr.shape)


def zeros(shape) -> Expr:
    return const(np.zeros(tensor_shape(shape)))


def arg(index: int, shape=()) -> Expr:
    return Expr("arg", (), {"index": int(index)}, tensor_shape(shape))


def param(name: str, shape=()) -> Expr:
    """A named tensor whose value is supplied at evaluation time."""
    return Expr("param", (), {"name": str(name)}, tensor_shape(shape))


def bound_var(shape=()) -> Expr:
    return Expr("bound", (), {"token": next(_bound_ids)}, tensor_shape(shape))


def is_zero_const(e: Expr) -> bool:
    return e.op == "const" and not np.any(e.params["value"])


# ---------------------------------------------------------------------------
# primitive table
# ---------------------------------------------------------------------------

def _lift(v, k: int):
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * k) if k else v


def _batch(v, rank: int) -> tuple:
    return v.shape[: v.ndim - rank]


UNARY: Dict[str, Callable] = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
    "sigmoid": lambda v: 0.5 * (1.0 + np.tanh(0.5 * v)),
}

BINARY: Dict[str, Callable] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _elementwise_shape(a: Expr, b: Expr, op: str) -> TensorShape:
    if a.shape == b.shape or not b.shape:
        return a.shape
    if not a.shape:
        return b.shape
    raise ShapeMismatch(f"{op}: cannot combine {format_shape(a.shape)} with {format_shape(b.shape)}")


def _unary(op: str, x) -> Expr:
    x = as_expr(x)
    return Expr(op, (x,), {}, x.shape)


def _binary(op: str, a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    return Expr(op, (a, b), {}, _elementwise_shape(a, b, op))


def add(a, b) -> Expr:
    return _binary("add", a, b)


def sub(a, b) -> Expr:
    return _binary("sub", a, b)


def mul(a, b) -> Expr:
    return _binary("mul", a, b)


def div(a, b) -> Expr:
    return _binary("div", a, b)


def neg(x) -> Expr:
    return _unary("neg", x)


def sin(x) -> Expr:
    return _unary("sin", x)


def cos(x) -> Expr:
    return _unary("cos", x)


def exp(x) -> Expr:
    return _unary("exp", x)


def log(x) -> Expr:
    return _unary("log", x)


def tanh(x) -> Expr:
    return _unary("tanh", x)


def sqrt(x) -> Expr:
    return _unary("sqrt", x)


def absolute(x) -> Expr:
    return _unary("abs", x)


def sign(x) -> Expr:
    return _unary("sign", x)


def sigmoid(x) -> Expr:
    return _unary("sigmoid", x)


def power(x, p) -> Expr:
    """``x ** p`` for a constant real exponent."""
    x = as_expr(x)
    if isinstance(p, Expr):
        raise TypeError("power() takes a constant exponent")
    return Expr("pow", (x,), {"p": float(p)}, x.shape)


def sum_axes(x, axes=None) -> Expr:
    """Sum over static axes (all of them by default)."""
    x = as_expr(x)
    if axes is None:
        axes = tuple(range(x.rank))
    axes = tuple(sorted(int(a) % max(x.rank, 1) for a in axes)) if x.rank else ()
    shape = tuple(d for i, d in enumerate(x.shape) if i not in axes)
    return Expr("sum", (x,), {"axes": axes}, shape)


def trace(x, k: int = 1) -> Expr:
    """Contract the last two groups of ``k`` axes: ``(r..., a..., a...) -> (r...)``."""
    x = as_expr(x)
    if k == 0:
        return x
    if x.rank < 2 * k or x.shape[-2 * k:-k] != x.shape[-k:]:
        raise ShapeMismatch(f"trace over {k} axis pairs needs matching trailing groups, got {format_shape(x.shape)}")
    return Expr("trace", (x,), {"k": int(k)}, x.shape[: x.rank - 2 * k])


_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


def einsum(spec: str, *operands) -> Expr:
    """Contraction over static axes, e.g. ``einsum("ij,j->i", m, v)``.

    Batch dims are handled implicitly; ``spec`` only mentions static axes.
    """
    ops = [as_expr(o) for o in operands]
    ins, out = spec.split("->")
    ins = ins.split(",")
    if len(ins) != len(ops):
        raise ShapeMismatch(f"einsum spec {spec!r} expects {len(ins)} operands")
    sizes: Dict[str, int] = {}
    for sub_, o in zip(ins, ops):
        if len(sub_) != o.rank:
            raise ShapeMismatch(f"einsum operand {format_shape(o.shape)} does not match subscripts {sub_!r}")
        for c, d in zip(sub_, o.shape):
            if sizes.setdefault(c, d) != d:
                raise ShapeMismatch(f"einsum index {c!r} has inconsistent sizes in {spec!r}")
    return Expr("einsum", ops, {"spec": spec}, tuple(sizes[c] for c in out))


def dot(a, b, k: int = 1) -> Expr:
    """Contract the last ``k`` axes of ``a`` with the first ``k`` axes of ``b``."""
    a, b = as_expr(a), as_expr(b)
    if a.rank < k or b.rank < k or a.shape[a.rank - k:] != b.shape[:k]:
        raise ShapeMismatch(f"dot over {k} axes: {format_shape(a.shape)} vs {format_shape(b.shape)}")
    la = _LETTERS[: a.rank]
    lb = la[a.rank - k:] + _LETTERS[a.rank: a.rank + b.rank - k]
    out = la[: a.rank - k] + lb[k:]
    return einsum(f"{la},{lb}->{out}", a, b)


def outer(a, b) -> Expr:
    return dot(a, b, 0)


def index(x, i: int, axis: int = 0) -> Expr:
    x = as_expr(x)
    if not 0 <= axis < x.rank:
        raise ShapeMismatch(f"cannot index axis {axis} of {format_shape(x.shape)}")
    n = x.shape[axis]
    if not -n <= i < n:
        raise ShapeMismatch(f"index {i} out of range for axis of size {n}")
    return Expr("index", (x,), {"i": int(i) % n, "axis": int(axis)}, x.shape[:axis] + x.shape[axis + 1:])


def stack(xs: Sequence, axis: int = 0) -> Expr:
    xs = [as_expr(x) for x in xs]
    if not xs:
        raise ShapeMismatch("stack needs at least one operand")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeMismatch("stack operands must share a shape")
    if not 0 <= axis <= len(shape):
        raise ShapeMismatch(f"stack axis {axis} out of range")
    return Expr("stack", xs, {"axis": int(axis)}, shape[:axis] + (len(xs),) + shape[axis:])


def reshape(x, shape) -> Expr:
    x = as_expr(x)
    shape = tensor_shape(shape)
    if math.prod(shape) != math.prod(x.shape):
        raise ShapeMismatch(f"cannot reshape {format_shape(x.shape)} to {format_shape(shape)}")
    if shape == x.shape:
        return x
    return Expr("reshape", (x,), {"to": shape}, shape)


def broadcast_to(x, shape) -> Expr:
    x = as_expr(x)
    shape = tensor_shape(shape)
    if x.shape == shape:
        return x
    if x.rank not in (0, len(shape)) or any(d not in (1, t) for d, t in zip(x.shape, shape)):
        raise ShapeMismatch(f"cannot broadcast {format_shape(x.shape)} to {format_shape(shape)}")
    return Expr("broadcast_to", (x,), {"to": shape}, shape)


def transpose(x, perm: Sequence[int]) -> Expr:
    x = as_expr(x)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.rank)):
        raise ShapeMismatch(f"bad axis permutation {perm} for rank {x.rank}")
    if perm == tuple(range(x.rank)):
        return x
    return Expr("transpose", (x,), {"perm": perm}, tuple(x.shape[p] for p in perm))


def gridsum(body: Expr, var: Expr, grid) -> Expr:
    """Quadrature ``sum_j w_j body[var := p_j]`` over ``grid``."""
    if var.op != "bound":
        raise TypeError("gridsum binds a variable created by bound_var()")
    if tuple(grid.point_shape) != var.shape:
        raise ShapeMismatch(f"grid points are {format_shape(grid.point_shape)}, variable is {format_shape(var.shape)}")
    return Expr("gridsum", (), {"body": body, "var": var, "grid": grid}, body.shape)


def det(m) -> Expr:
    """Closed-form determinant of a 1x1, 2x2 or 3x3 matrix."""
    m = as_expr(m)
    if m.rank != 2 or m.shape[0] != m.shape[1] or m.shape[0] > 3:
        raise ShapeMismatch(f"det is provided for square matrices up to 3x3, got {format_shape(m.shape)}")
    n = m.shape[0]
    a = [[index(index(m, i), j) for j in range(n)] for i in range(n)]
    if n == 1:
        return a[0][0]
    if n == 2:
        return a[0][0] * a[1][1] - a[0][1] * a[1][0]
    return (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))


def abs_det(m) -> Expr:
    return absolute(det(m))


def with_children(e: Expr, children: Sequence[Expr]) -> Expr:
    """Rebuild ``e`` with new children (operands, then the body for a gridsum)."""
    children = tuple(children)
    if e.op == "gridsum":
        *ops, body = children
        if body is e.params["body"]:
            return e
        return gridsum(body, e.params["var"], e.params["grid"])
    if all(a is b for a, b in zip(children, e.operands)):
        return e
    op = e.op
    if op in BINARY:
        return _binary(op, *children)
    if op in UNARY:
        return _unary(op, *children)
    if op == "pow":
        return power(children[0], e.params["p"])
    if op == "sum":
        x = children[0]
        return Expr("sum", (x,), dict(e.params), e.shape)
    if op == "trace":
        return trace(children[0], e.params["k"])
    if op == "einsum":
        return einsum(e.params["spec"], *children)
    if op == "index":
        return index(children[0], e.params["i"], e.params["axis"])
    if op == "stack":
        return stack(children, e.params["axis"])
    if op == "reshape":
        return reshape(children[0], e.params["to"])
    if op == "broadcast_to":
        return broadcast_to(children[0], e.params["to"])
    if op == "transpose":
        return transpose(children[0], e.params["perm"])
    raise ValueError(f"cannot rebuild leaf op {op!r}")


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------

def topo_order(roots: Iterable[Expr], into_bodies: bool = True) -> List[Expr]:
    """Post-order list of every node reachable from ``roots`` (operands first)."""
    seen: set = set()
    order: List[Expr] = []
    for root in roots:
        if id(root) in seen:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            kids = node.children() if into_bodies else node.operands
            for c in reversed(kids):
                if id(c) not in seen:
                    stack_.append((c, False))
    return order


def rebuild(roots: Sequence[Expr], leaf_fn: Callable[[Expr], "Expr | None"]) -> List[Expr]:
    """Bottom-up rewrite: ``leaf_fn`` may replace any node (return None to keep it)."""
    new: Dict[int, Expr] = {}
    for node in topo_order(roots):
        repl = leaf_fn(node)
        if repl is not None:
            new[id(node)] = repl
        elif node.children():
            new[id(node)] = with_children(node, [new[id(c)] for c in node.children()])
        else:
            new[id(node)] = node
    return [new[id(r)] for r in roots]


def substitute(roots: Sequence[Expr], args: "Dict[int, Expr] | None" = None,
               params: "Dict[str, Expr] | None" = None) -> List[Expr]:
    """Replace argument references (by index) and/or parameters (by name)."""
    args = args or {}
    params = params or {}

    def leaf(node: Expr):
        if node.op == "arg" and node.params["index"] in args:
            repl = args[node.params["index"]]
            if repl.shape != node.shape:
                raise ShapeMismatch(
                    f"substituting {format_shape(repl.shape)} for argument {node.params['index']} of shape {format_shape(node.shape)}")
            return repl
        if node.op == "param" and node.params["name"] in params:
            return params[node.params["name"]]
        return None

    return rebuild(roots, leaf)


def arg_indices(roots: Iterable[Expr]) -> frozenset:
    return frozenset(n.params["index"] for n in topo_order(roots) if n.op == "arg")


def param_names(roots: Iterable[Expr]) -> Dict[str, TensorShape]:
    return {n.params["name"]: n.shape for n in topo_order(roots) if n.op == "param"}


def node_count(roots: Iterable[Expr]) -> int:
    return len(topo_order(roots))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _impl(node: Expr, vals: list):
    op = node.op
    if op in UNARY:
        return UNARY[op](vals[0])
    if op in BINARY:
        a, b = vals
        ra, rb = node.operands[0].rank, node.operands[1].rank
        if ra < rb:
            a = _lift(a, rb - ra)
        elif rb < ra:
            b = _lift(b, ra - rb)
        return BINARY[op](a, b)
    if op == "pow":
        p = node.params["p"]
        return np.power(vals[0], int(p)) if float(p).is_integer() else np.power(vals[0], p)
    x = vals[0] if vals else None
    if op == "sum":
        r = node.operands[0].rank
        axes = tuple(a - r for a in node.params["axes"])
        return np.sum(x, axis=axes) if axes else np.asarray(x)
    if op == "trace":
        k = node.params["k"]
        r = node.rank
        res = _LETTERS[:r]
        grp = _LETTERS[r:r + k]
        return np.einsum(f"...{res}{grp}{grp}->...{res}", x)
    if op == "einsum":
        ins, out = node.params["spec"].split("->")
        spec = ",".join("..." + s for s in ins.split(",")) + "->..." + out
        return np.einsum(spec, *vals)
    if op == "index":
        r = node.operands[0].rank
        axis = node.params["axis"]
        return x[(Ellipsis, node.params["i"]) + (slice(None),) * (r - axis - 1)]
    if op == "stack":
        arrs = np.broadcast_arrays(*vals)
        return np.stack(arrs, axis=node.params["axis"] - node.rank)
    if op == "reshape":
        r = node.operands[0].rank
        return np.reshape(x, _batch(x, r) + node.params["to"])
    if op == "broadcast_to":
        r_in = node.operands[0].rank
        to = node.params["to"]
        if r_in == 0:
            x = _lift(x, len(to))
        return np.broadcast_to(x, _batch(x, len(to)) + to)
    if op == "transpose":
        nb = x.ndim - node.rank
        return np.transpose(x, tuple(range(nb)) + tuple(nb + p for p in node.params["perm"]))
    raise ValueError(f"no implementation for op {op!r}")


class _Scope:
    """Evaluation environment.  A gridsum opens a child scope whose frame has one
    extra trailing batch axis; nodes that do not mention the bound variable are
    evaluated in the parent and broadcast along the new axis."""

    __slots__ = ("parent", "var_token", "points", "args", "params", "memo")

    def __init__(self, parent, var_token, points, args, params):
        self.parent = parent
        self.var_token = var_token
        self.points = points
        self.args = args
        self.params = params
        self.memo: Dict[int, np.ndarray] = {}

    def value(self, root: Expr):
        memo = self.memo
        todo = [root]
        while todo:
            node = todo[-1]
            key = id(node)
            if key in memo:
                todo.pop()
                continue
            if self.parent is not None and self.var_token not in node.free_bound:
                v = self.parent.value(node)
                memo[key] = np.expand_dims(v, v.ndim - node.rank)
                todo.pop()
                continue
            op = node.op
            if op == "const":
                memo[key] = node.params["value"]
            elif op == "arg":
                memo[key] = self._root().args[node.params["index"]]
            elif op == "param":
                name = node.params["name"]
                params = self._root().params
                if params is None or name not in params:
                    raise KeyError(f"no value bound for parameter {name!r}")
                memo[key] = _checked(np.asarray(params[name], dtype=np.float64), node.shape, f"parameter {name!r}")
            elif op == "bound":
                if node.params["token"] != self.var_token:
                    raise RuntimeError("bound variable evaluated outside its gridsum")
                memo[key] = self.points
            elif op == "gridsum":
                memo[key] = self._gridsum(node)
            else:
                missing = [o for o in node.operands if id(o) not in memo]
                if missing:
                    todo.extend(missing)
                    continue
                try:
                    memo[key] = _impl(node, [memo[id(o)] for o in node.operands])
                except FloatingPointError as exc:
                    raise DomainError(f"{op} left the real domain: {exc}") from None
            todo.pop()
        return memo[id(root)]

    def _root(self) -> "_Scope":
        s = self
        while s.parent is not None:
            s = s.parent
        return s

    def _gridsum(self, node: Expr):
        grid = node.params["grid"]
        var = node.params["var"]
        child = _Scope(self, var.params["token"], grid.points, None, None)
        val = child.value(node.params["body"])
        r = node.rank
        w = grid.weights.reshape((-1,) + (1,) * r)
        return np.sum(w * val, axis=-(r + 1))


def _checked(value: np.ndarray, shape: TensorShape, what: str) -> np.ndarray:
    if value.shape[value.ndim - len(shape):] != shape or value.ndim < len(shape):
        raise ShapeMismatch(f"{what} has shape {value.shape}, expected trailing {format_shape(shape)}")
    return value


def evaluate_many(roots: Sequence[Expr], args: Sequence, arg_shapes: "Sequence[TensorShape] | None" = None,
                  params: "dict | None" = None) -> List[np.ndarray]:
    """Evaluate several roots that share one argument binding (and one memo)."""
    vals = [np.asarray(a, dtype=np.float64) for a in args]
    if arg_shapes is not None:
        if len(arg_shapes) != len(vals):
            raise ShapeMismatch(f"expected {len(arg_shapes)} arguments, got {len(vals)}")
        for i, (v, s) in enumerate(zip(vals, arg_shapes)):
            if s is not None:  # unread arguments are not checked
                _checked(v, tuple(s), f"argument {i}")
    scope = _Scope(None, None, None, vals, params)
    with _errstate():
        return [scope.value(r) for r in roots]


def evaluate(e: Expr, *args, params: "dict | None" = None) -> np.ndarray:
    """Evaluate ``e`` with positional argument values (leading dims are batch dims)."""
    shapes = _arg_shapes_of(e, len(args))
    return evaluate_many([e], args, shapes, params)[0]


def _arg_shapes_of(e: Expr, n: int) -> List[TensorShape]:
    shapes: Dict[int, TensorShape] = {}
    for node in topo_order([e]):
        if node.op == "arg":
            i = node.params["index"]
            if i >= n:
                raise ShapeMismatch(f"expression reads argument {i} but only {n} were given")
            shapes[i] = node.shape
    return [shapes.get(i) for i in range(n)]


def evaluate_loose(roots: Sequence[Expr], args: Sequence, params=None) -> List[np.ndarray]:
    """Like :func:`evaluate_many` without argument shape checks (internal fast path)."""
    scope = _Scope(None, None, None, list(args), params)
    with _errstate():
        return [scope.value(r) for r in roots]


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

def pretty(roots: "Expr | Sequence[Expr]") -> str:
    """One node per line: ``%k = op(%i, %j) {params} : f[shape]``."""
    if isinstance(roots, Expr):
        roots = [roots]
    order = topo_order(roots)
    num = {id(n): i for i, n in enumerate(order)}
    lines = []
    for n in order:
        desc = ""
        if n.op == "const":
            v = n.params["value"]
            desc = " " + np.array2string(v, precision=6, threshold=6).replace("\n", "") if v.size <= 6 else f" <{v.size} values>"
        elif n.op == "arg":
            desc = f" #{n.params['index']}"
        elif n.op == "param":
            desc = f" {n.params['name']}"
        elif n.op == "gridsum":
            desc = f" over %{num[id(n.params['var'])]} body=%{num[id(n.params['body'])]} n={len(n.params['grid'].weights)}"
        else:
            extra = {k: v for k, v in n.params.items()}
            desc = (" " + ", ".join(f"%{num[id(o)]}" for o in n.operands)) if n.operands else ""
            if extra:
                desc += " {" + ", ".join(f"{k}={v}" for k, v in extra.items()) + "}"
        lines.append(f"%{num[id(n)]} = {n.op}{desc} : {format_shape(n.shape)}")
    return "\n".join(lines)
