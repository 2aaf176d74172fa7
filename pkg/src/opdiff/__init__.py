"""Differentiable operators and functionals over function values."""

__version__ = "0.1.0"

from . import engine
from .errors import *  # noqa: F401,F403
from .operators import (
    FunctionValue, apply, broadcast_fn, compose, constant, cos, divergence, dot, exp, from_expr, function,
    identity, integral_transform, integrate, linear_transpose, linearize, log, nabla, permute_args,
    projection, sigmoid, sin, sqrt, tanh, zeros_like, zip_functions,
)
from .quadrature import Grid, inner_product, make_gauss_legendre, make_uniform, product_grid
from .signature import FunctionSignature, check_compose, nabla_signature, parse_signature
