"""Static shapes of function values.

A function value is described the way an array is described by its shape:
the shape of what it returns and the shape of each argument, rendered as
``F[ret,arg0,arg1,...]`` with tensor shapes written ``f[d0,d1,...]``.
Shapes are checked when operator graphs are built, never during evaluation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

from .errors import ArityMismatch, IndexOutOfRange, ShapeMismatch

TensorShape = Tuple[int, ...]


def tensor_shape(dims: Iterable[int] | int) -> TensorShape:
    """Normalise ``dims`` to a tuple of non-negative ints (``()`` is a scalar)."""
    if isinstance(dims, int):
        dims = (dims,)
    out = tuple(int(d) for d in dims)
    for d in out:
        if d < 0:
            raise ShapeMismatch(f"negative dimension in shape {out}")
    return out


def format_shape(shape: TensorShape) -> str:
    return "f[" + ",".join(str(d) for d in shape) + "]"


@dataclass(frozen=True)
class FunctionSignature:
    """Return shape(s) and argument shapes of a function value.

    ``rets`` has one entry for ordinary functions and two or more for the
    outputs of :func:`opdiff.operators.zip_functions`.  An empty ``args``
    tuple marks a *functional value*: the tensor left after every argument
    has been integrated out.
    """

    rets: Tuple[TensorShape, ...]
    args: Tuple[TensorShape, ...]

    def __post_init__(self):
        object.__setattr__(self, "rets", tuple(tensor_shape(r) for r in self.rets))
        object.__setattr__(self, "args", tuple(tensor_shape(a) for a in self.args))
        if not self.rets:
            raise ShapeMismatch("a function must return at least one tensor")

    @classmethod
    def of(cls, ret: Sequence[int], *args: Sequence[int]) -> "FunctionSignature":
        return cls((tensor_shape(ret),), tuple(tensor_shape(a) for a in args))

    @property
    def ret(self) -> TensorShape:
        if len(self.rets) != 1:
            raise ShapeMismatch(f"{self} returns {len(self.rets)} tensors, not one")
        return self.rets[0]

    @property
    def arity(self) -> int:
        return len(self.args)

    @property
    def is_multi_return(self) -> bool:
        return len(self.rets) > 1

    @property
    def is_functional_value(self) -> bool:
        return not self.args

    def with_args(self, args: Sequence[TensorShape]) -> "FunctionSignature":
        return FunctionSignature(self.rets, tuple(args))

    def with_ret(self, ret: TensorShape) -> "FunctionSignature":
        return FunctionSignature((tensor_shape(ret),), self.args)

    def __str__(self) -> str:
        if len(self.rets) == 1:
            ret = format_shape(self.rets[0])
        else:
            ret = "(" + ",".join(format_shape(r) for r in self.rets) + ")"
        return "F[" + ",".join([ret] + [format_shape(a) for a in self.args]) + "]"


_TENSOR_RE = re.compile(r"f\[([0-9,\s]*)\]")


def parse_signature(text: str) -> FunctionSignature:
    """Parse ``"F[f[],f[3],f[2,3]]"`` (or a multi-return ``"F[(f[],f[]),f[]]"``)."""
    text = text.strip().replace(" ", "")
    if not (text.startswith("F[") and text.endswith("]")):
        raise ShapeMismatch(f"not a function signature: {text!r}")
    body = text[2:-1]
    rets: list[TensorShape] = []
    if body.startswith("("):
        close = body.index(")")
        rets = [_parse_tensor(m) for m in _TENSOR_RE.findall(body[1:close])]
        body = body[close + 1:].lstrip(",")
        shapes = [_parse_tensor(m) for m in _TENSOR_RE.findall(body)]
        return FunctionSignature(tuple(rets), tuple(shapes))
    shapes = [_parse_tensor(m) for m in _TENSOR_RE.findall(body)]
    if not shapes:
        raise ShapeMismatch(f"no tensor shapes in {text!r}")
    return FunctionSignature((shapes[0],), tuple(shapes[1:]))


def _parse_tensor(inner: str) -> TensorShape:
    inner = inner.strip()
    if not inner:
        return ()
    return tensor_shape(int(tok) for tok in inner.split(","))


def as_signature(sig: "FunctionSignature | str") -> FunctionSignature:
    return parse_signature(sig) if isinstance(sig, str) else sig


def check_compose(outer: FunctionSignature, inners: Sequence[FunctionSignature]) -> FunctionSignature:
    """Signature of ``x -> outer(inner_0(x), inner_1(x), ...)``.

    Every inner must take the same argument list.  A multi-return inner
    feeds consecutive arguments of ``outer``.
    """
    if not inners:
        raise ArityMismatch("compose needs at least one inner function")
    args = inners[0].args
    for i, g in enumerate(inners[1:], start=1):
        if g.args != args:
            raise ShapeMismatch(
                f"inner {i} takes {g.with_args(g.args)} arguments, inner 0 takes "
                f"{[format_shape(a) for a in args]}; all inners must share one argument list"
            )
    fed = [r for g in inners for r in g.rets]
    if len(fed) != outer.arity:
        raise ArityMismatch(f"outer {outer} takes {outer.arity} arguments but inners return {len(fed)} tensors")
    for i, (want, got) in enumerate(zip(outer.args, fed)):
        if want != got:
            raise ShapeMismatch(
                f"argument {i} of outer {outer} is {format_shape(want)} but the inner feeding it returns {format_shape(got)}"
            )
    return FunctionSignature(outer.rets, args)


def nabla_signature(sig: FunctionSignature, argnum: int) -> FunctionSignature:
    """Derivative w.r.t. ``args[argnum]``: that argument's dims are appended to the return dims."""
    if not 0 <= argnum < sig.arity:
        raise IndexOutOfRange(f"argnum {argnum} out of range for {sig}")
    return sig.with_ret(sig.ret + sig.args[argnum])
