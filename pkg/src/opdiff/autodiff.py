"""Forward and reverse differentiation of operator programs.

An *operator program* is a Python callable mapping function values to a
function value, built from the primitives in :mod:`opdiff.operators`.  It is
traced on placeholder functions; the forward rules below produce the tangent
program, and the backward rules transpose a program that is linear in its
placeholders.  Reverse mode is forward mode followed by transposition of the
tangent program.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import engine as E
from . import operators as ops
from .errors import (
    GridRequired, IntegrationRequired, MissingRule, NotLinear, ShapeMismatch, UndefinedTranspose,
)
from .operators import FunctionValue
from .quadrature import Grid
from .signature import as_signature


@dataclass
class OperatorTangent:
    primal: FunctionValue
    tangent: FunctionValue

    def __post_init__(self):
        if self.primal.signature != self.tangent.signature:
            raise ShapeMismatch(f"tangent {self.tangent.signature} does not match primal {self.primal.signature}")


@dataclass
class TraceRecord:
    """The linear part of a program, in the order the backward pass undoes it.

    Each entry is ``(primitive, operand slots, static params, linear evidence)``.
    Slots name earlier entries by position or an input as ``"in:k"``; operands
    that do not depend on the inputs appear as ``"fixed"``.
    """

    entries: List[tuple] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _zeros_like(f: FunctionValue) -> FunctionValue:
    if f.signature.is_multi_return:
        return ops.pack([ops.constant(np.zeros(r), f.args)
                         for r in f.signature.rets])
    return ops.zeros_like(f)


def _add(a: Optional[FunctionValue], b: Optional[FunctionValue]) -> Optional[FunctionValue]:
    if a is None:
        return b
    if b is None:
        return a
    if a.signature.is_multi_return:
        return ops.pack([x + y for x, y in zip(ops.unpack(a), ops.unpack(b))])
    return a + b


def _as_tuple(x) -> tuple:
    return tuple(x) if isinstance(x, (tuple, list)) else (x,)


def _trace(program: Callable, items: Sequence, prefix: str):
    placeholders = []
    for i, it in enumerate(items):
        if isinstance(it, FunctionValue):
            placeholders.append(ops.var(it.signature, f"{prefix}{i}", like=it))
        else:
            placeholders.append(ops.var(it, f"{prefix}{i}"))
    out = program(*placeholders)
    if not isinstance(out, FunctionValue):
        raise TypeError("an operator program must return a function value")
    return placeholders, out


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------

def _jvp_compose(node, t):
    f, *gs = node.operands
    tf, tgs = t[0], t[1:]
    out = None
    if tf is not None:
        out = ops.compose(tf, gs)
    if any(x is not None for x in tgs):
        filled = [x if x is not None else _zeros_like(g) for g, x in zip(gs, tgs)]
        out = _add(out, ops.compose(ops.linearize(f), list(gs) + filled))
    return out


def _jvp_zip(node, t):
    a, b = node.operands
    ta = t[0] if t[0] is not None else _zeros_like(a)
    tb = t[1] if t[1] is not None else _zeros_like(b)
    return ops.zip_functions(ta, tb)


def _jvp_pack(node, t):
    return ops.pack([x if x is not None else _zeros_like(g) for g, x in zip(node.operands, t)])


_JVP_RULES: Dict[str, Callable] = {
    "compose": _jvp_compose,
    "nabla": lambda n, t: ops.nabla(t[0], n.params["argnum"]),
    "linearize": lambda n, t: ops.linearize(t[0]),
    "linear_transpose": lambda n, t: ops.linear_transpose(t[0], n.params["argnum"], n.params.get("zero", ())),
    "integrate": lambda n, t: ops.integrate(t[0], n.params["grid"], n.params["argnum"]),
    "permute_args": lambda n, t: ops.permute_args(t[0], n.params["perm"]),
    "zip": _jvp_zip,
    "pack": _jvp_pack,
    "broadcast": lambda n, t: ops.broadcast_fn(t[0], [n.args[j] for j in n.params["positions"]],
                                               n.params["positions"], n.params.get("grids")),
}


def jvp_graph(out: FunctionValue, seeds: Dict[str, FunctionValue]) -> Optional[FunctionValue]:
    """Tangent of ``out`` given tangents for some of its nodes (``{node id: tangent}``).

    Returns None when ``out`` does not depend on any seeded node.
    """
    tan: Dict[str, Optional[FunctionValue]] = {}
    for node in ops.graph_nodes(out):
        if node.id in seeds:
            tan[node.id] = seeds[node.id]
            continue
        if not node.operands:
            tan[node.id] = None
            continue
        t = [tan[o.id] for o in node.operands]
        if all(x is None for x in t):
            tan[node.id] = None
            continue
        rule = _JVP_RULES.get(node.kind)
        if rule is None:
            raise MissingRule(f"no tangent rule for {node.kind!r}")
        tan[node.id] = rule(node, t)
    return tan[out.id]


def op_jvp(program: Callable, primals: Sequence[FunctionValue], tangents: Sequence[FunctionValue]) -> OperatorTangent:
    """Push ``tangents`` through ``program`` at ``primals``."""
    primals, tangents = _as_tuple(primals), _as_tuple(tangents)
    if len(primals) != len(tangents):
        raise ShapeMismatch("need one tangent per primal")
    for p, t in zip(primals, tangents):
        if p.signature != t.signature:
            raise ShapeMismatch(f"tangent {t.signature} does not match primal {p.signature}")
    xs, out = _trace(program, primals, "x")
    dxs = [ops.var(t.signature, f"dx{i}", like=t) for i, t in enumerate(tangents)]
    tan = jvp_graph(out, {x.id: d for x, d in zip(xs, dxs)})
    mapping = {x.id: p for x, p in zip(xs, primals)}
    mapping.update({d.id: t for d, t in zip(dxs, tangents)})
    primal_out = ops.substitute(out, mapping)[0]
    tangent_out = _zeros_like(primal_out) if tan is None else ops.substitute(tan, mapping)[0]
    return OperatorTangent(primal_out, tangent_out)


# ---------------------------------------------------------------------------
# backward (transpose) rules
# ---------------------------------------------------------------------------

def _pick_grid(grids: Sequence[Grid], shape, what: str) -> Grid:
    for g in grids:
        if g.point_shape == tuple(shape):
            return g
    raise GridRequired(f"{what} needs a quadrature grid with points of shape {tuple(shape)}")


def _is_identity_inners(node: FunctionValue) -> bool:
    _, *gs = node.operands
    slot = 0
    for g in gs:
        if g.signature.is_multi_return or g.kind != "leaf":
            return False
        e = g.expr
        if e.op != "arg" or e.params["index"] != slot:
            return False
        slot += 1
    return slot == node.arity


def _slot_operands(gs: Sequence[FunctionValue]) -> List[FunctionValue]:
    out = []
    for g in gs:
        out.extend(ops.unpack(g))
    return out


class _Backward:
    def __init__(self, grids: Sequence[Grid]):
        self.grids = list(grids)

    def compose(self, node, c, dep):
        f, *gs = node.operands
        if dep[0]:
            if any(dep[1:]):
                raise NotLinear("compose depends on the inputs through both the outer and an inner function")
            if not _is_identity_inners(node):
                raise UndefinedTranspose(
                    "transposing compose w.r.t. the outer function needs the inner map inverted; only the identity is supported")
            return [(f, c)]
        slot_of, pos = [], 0
        for g in gs:
            k = len(g.signature.rets)
            slot_of.append(list(range(pos, pos + k)))
            pos += k
        dslots = [s for g_dep, slots in zip(dep[1:], slot_of) for s in slots if g_dep]
        zero_slots = {s for g, slots in zip(gs, slot_of) if g.is_zero for s in slots}
        group = self._group(f, set(dslots), zero_slots)
        pieces = _slot_operands(gs)
        out = []
        for gi, (g, slots, g_dep) in enumerate(zip(gs, slot_of, dep[1:])):
            if not g_dep:
                continue
            cts = []
            for s in slots:
                others = []
                for j, p in enumerate(pieces):
                    if j == s:
                        continue
                    others.append(ops.zeros_like(p) if j in group else p)
                t = ops.linear_transpose(f, s, sorted(group - {s}))
                cts.append(ops.compose(t, others + [c]))
            out.append((g, ops.pack(cts)))
        return out

    @staticmethod
    def _group(f, dslots, zero_slots):
        if f.linear_in(dslots):
            return frozenset(dslots)
        for g in sorted(f.linear_groups, key=len):
            if dslots <= g and (g - dslots) <= zero_slots:
                return g
        raise NotLinear(f"outer {f.signature} is not linear in the slots {sorted(dslots)} fed by the inputs")

    def nabla(self, node, c, dep):
        h = node.operands[0]
        k = node.params["argnum"]
        rank = len(h.args[k])
        d = ops.nabla(c, k)
        if rank == 0:
            return [(h, -d)]
        return [(h, ops.apply(lambda j: -E.trace(j, rank), d))]

    def linearize(self, node, c, dep):
        h = node.operands[0]
        n = h.arity
        total = None
        for i in range(n):
            u = ops.projection(c.args, n + i)
            body = ops.apply(lambda a, b: E.outer(a, b), c, u) if (c.ret or h.args[i]) else c * u
            m = body
            for j in reversed(range(n)):
                grid = _pick_grid(self.grids, h.args[j], "transposing linearize (tangent-slot integral)")
                m = ops.integrate(m, grid, argnum=n + j)
            d = ops.nabla(m, i)
            rank = len(h.args[i])
            term = -d if rank == 0 else ops.apply(lambda j, rank=rank: -E.trace(j, rank), d)
            total = _add(total, term)
        return [(h, total)]

    def linear_transpose(self, node, c, dep):
        raise UndefinedTranspose("transposing linear_transpose w.r.t. its operand needs the cotangent inverted")

    def integrate(self, node, c, dep):
        h = node.operands[0]
        k = node.params["argnum"]
        return [(h, ops.broadcast_fn(c, [h.args[k]], [k]))]

    def permute_args(self, node, c, dep):
        h = node.operands[0]
        perm = node.params["perm"]
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return [(h, ops.permute_args(c, inv))]

    def zip(self, node, c, dep):
        a, b = node.operands
        pieces = ops.unpack(c)
        ra = len(a.signature.rets)
        ca, cb = ops.pack(pieces[:ra]), ops.pack(pieces[ra:])
        out = []
        if dep[0]:
            m = ca
            for j in reversed(range(b.arity)):
                m = ops.integrate(m, _pick_grid(self.grids, b.args[j], "transposing zip"), argnum=a.arity + j)
            out.append((a, m))
        if dep[1]:
            m = cb
            for j in reversed(range(a.arity)):
                m = ops.integrate(m, _pick_grid(self.grids, a.args[j], "transposing zip"), argnum=j)
            out.append((b, m))
        return out

    def pack(self, node, c, dep):
        pieces = ops.unpack(c)
        out, pos = [], 0
        for g, d in zip(node.operands, dep):
            k = len(g.signature.rets)
            if d:
                out.append((g, ops.pack(pieces[pos:pos + k])))
            pos += k
        return out

    def broadcast(self, node, c, dep):
        h = node.operands[0]
        positions = node.params["positions"]
        grids = node.params.get("grids")
        m = c
        for idx in reversed(range(len(positions))):
            p = positions[idx]
            grid = grids[idx] if grids else _pick_grid(self.grids, node.args[p], "transposing broadcast")
            m = ops.integrate(m, grid, argnum=p)
        return [(h, m)]


def _dependents(order, input_pos) -> set:
    dependent = set()
    for node in order:
        if node.id in input_pos or any(o.id in dependent for o in node.operands):
            dependent.add(node.id)
    return dependent


def linear_record(out: FunctionValue, inputs: Sequence[FunctionValue]) -> TraceRecord:
    """The input-dependent part of ``out`` as a :class:`TraceRecord`."""
    input_pos = {x.id: i for i, x in enumerate(inputs)}
    order = ops.graph_nodes(out)
    dependent = _dependents(order, input_pos)
    record = TraceRecord()
    lin = [n for n in order if n.id in dependent and n.id not in input_pos]
    slot_name = {n.id: k for k, n in enumerate(lin)}
    for n in lin:
        slots = [f"in:{input_pos[o.id]}" if o.id in input_pos else slot_name.get(o.id, "fixed")
                 for o in n.operands]
        evidence = [o.linear_flags for o in n.operands if o.id not in dependent]
        record.entries.append((n.kind, tuple(slots), dict(n.params), evidence))
    return record


def _transpose_graph(out: FunctionValue, inputs: Sequence[FunctionValue], cotangent: FunctionValue,
                     grids: Sequence[Grid]) -> List[FunctionValue]:
    if cotangent.signature != out.signature:
        raise ShapeMismatch(f"cotangent {cotangent.signature} does not match output {out.signature}")
    input_pos = {x.id: i for i, x in enumerate(inputs)}
    order = ops.graph_nodes(out)
    dependent = _dependents(order, input_pos)
    results: List[Optional[FunctionValue]] = [None] * len(inputs)
    if out.id not in dependent:
        return [_zeros_like(x) for x in inputs]
    ct: Dict[str, FunctionValue] = {out.id: cotangent}
    back = _Backward(grids)
    for node in reversed(order):
        if node.id not in dependent or node.id not in ct:
            continue
        c = ct.pop(node.id)
        if node.id in input_pos:
            i = input_pos[node.id]
            results[i] = _add(results[i], c)
            continue
        rule = getattr(back, node.kind, None)
        if rule is None:
            raise MissingRule(f"no transpose rule for {node.kind!r}")
        dep = [o.id in dependent for o in node.operands]
        for operand, oc in rule(node, c, dep):
            ct[operand.id] = _add(ct.get(operand.id), oc)
    return [r if r is not None else _zeros_like(x) for r, x in zip(results, inputs)]


def _grid_list(grids) -> List[Grid]:
    if grids is None:
        return []
    if isinstance(grids, Grid):
        return [grids]
    return list(grids)


def op_transpose(program: Callable, inputs: Sequence, cotangent: FunctionValue, grids=None):
    """Adjoint of a program that is linear in its inputs.

    ``inputs`` gives the input signatures (or example function values).
    Returns one cotangent function per input (a tuple, or a single function
    for a one-input program).  ``grids`` supplies quadrature for rules that
    integrate out an argument (linearize, zip, broadcast without its own grid).
    """
    items = [x if isinstance(x, FunctionValue) else as_signature(x) for x in _as_tuple(inputs)]
    xs, out = _trace(program, items, "u")
    res = _transpose_graph(out, xs, cotangent, _grid_list(grids))
    return res[0] if len(res) == 1 else tuple(res)


class VJP:
    """Pull-back of cotangents through a program, linearized at fixed primals."""

    def __init__(self, tangent_graph, dvars, primals, grids):
        self._graph = tangent_graph
        self._dvars = dvars
        self._primals = primals
        self._grids = grids

    @property
    def linear_program(self) -> Optional[FunctionValue]:
        """The tangent program at the primals; its free placeholders are the input tangents."""
        return self._graph

    @property
    def trace(self) -> TraceRecord:
        if self._graph is None:
            return TraceRecord()
        return linear_record(self._graph, self._dvars)

    def __call__(self, cotangent: FunctionValue):
        if self._graph is None:
            res = [_zeros_like(p) for p in self._primals]
        else:
            res = _transpose_graph(self._graph, self._dvars, cotangent, self._grids)
        return res[0] if len(res) == 1 else tuple(res)


def op_vjp(program: Callable, *primals: FunctionValue, grids=None):
    """``(program(*primals), vjp)`` where ``vjp(cotangent)`` returns input cotangents."""
    grids = _grid_list(grids)
    xs, out = _trace(program, primals, "x")
    dxs = [ops.var(p.signature, f"dx{i}", like=p) for i, p in enumerate(primals)]
    tan = jvp_graph(out, {x.id: d for x, d in zip(xs, dxs)})
    mapping = {x.id: p for x, p in zip(xs, primals)}
    primal_out = ops.substitute(out, mapping)[0]
    lin = None if tan is None else ops.substitute(tan, mapping)[0]
    return primal_out, VJP(lin, dxs, primals, grids)


def functional_grad(F: Callable, f: FunctionValue, grids=None) -> FunctionValue:
    """Functional derivative of the scalar functional ``F`` at ``f``.

    ``F`` must end in a full integral (its value has no arguments).
    """
    xs, out = _trace(F, [f], "f")
    if out.arity != 0 or out.signature.rets != ((),):
        raise IntegrationRequired(f"functional returns {out.signature}; integrate out every argument to get a scalar")
    _, vjp = op_vjp(F, f, grids=grids)
    one = ops.constant(1.0, ())
    return vjp(one)
