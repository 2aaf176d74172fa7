"""First-order differentiation of pointwise tensor expressions."""

from .core import (
    Expr, abs_det, absolute, add, arg, as_expr, bound_var, broadcast_to, const, cos, det, div, dot,
    einsum, evaluate, evaluate_many, exp, gridsum, index, is_strict, log, mul, neg, node_count, outer,
    param, power, pretty, reshape, set_strict, sigmoid, sign, sin, sqrt, stack, strict_mode, sub,
    substitute, sum_axes, tanh, topo_order, trace, transpose, zeros,
)
from .ad import (
    DualValue, backprop, classify, grad, is_linear_in, jacobian, jvp1, jvp_exprs, linearize_expr,
    transpose1, transpose_expr,
)

__all__ = [name for name in dir() if not name.startswith("_")]
