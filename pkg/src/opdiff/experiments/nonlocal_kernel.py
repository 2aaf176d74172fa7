"""Gradient descent directly on the kernel functions of a two-layer integral network.

Each layer is ``f_out(x) = integral k(x, y) f_in(y) dy + b(x)``; a ``tanh``
follows the first layer.  The loss is ``integral (h_2(x) - t(x))^2 dx`` and
each step updates the four functions ``k1, b1, k2, b2`` by
``k <- k - step_size * dL/dk``.  The updated functions are new graphs built on
top of the previous ones, so the graph grows every step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .. import engine as E
from .. import memo
from .. import operators as ops
from ..autodiff import op_vjp
from ..errors import GraphTooLarge
from ..quadrature import Grid, make_gauss_legendre, make_uniform, mesh_args


def initial_functions():
    """``f = sin(4 pi x)``, ``b = sin(pi x)``, ``t = cos(pi x)``, ``k(x, y) = sin(x) + cos(y)``."""
    f = ops.function(lambda x: E.sin(4 * math.pi * x), "F[f[],f[]]")
    b = ops.function(lambda x: E.sin(math.pi * x), "F[f[],f[]]")
    t = ops.function(lambda x: E.cos(math.pi * x), "F[f[],f[]]")
    k = ops.function(lambda x, y: E.sin(x) + E.cos(y), "F[f[],f[],f[]]")
    return f, b, t, k


def network(f, grid: Grid):
    def forward(k1, b1, k2, b2):
        h1 = ops.tanh(ops.integral_transform(k1, f, grid) + b1)
        return ops.integral_transform(k2, h1, grid) + b2
    return forward


def loss_program(f, t, grid: Grid):
    forward = network(f, grid)

    def loss(k1, b1, k2, b2):
        return ops.integrate((forward(k1, b1, k2, b2) - t) ** 2, grid)
    return loss


def squared_norm(g: ops.FunctionValue, grid: Grid) -> float:
    """``integral g^2`` over the product of ``grid`` with itself once per argument."""
    args, w = mesh_args([grid] * g.arity)
    v = np.broadcast_to(g(*args), w.shape)
    return float(np.sum(w * v * v))


@dataclass
class Result:
    steps: List[tuple] = field(default_factory=list)  # (step, loss, grad_norm)
    kernel: List[tuple] = field(default_factory=list)  # (step, x, y, k1)
    node_counts: List[int] = field(default_factory=list)
    graph_roots: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def run(steps: int = 4, step_size: float = 0.1, grid: "Grid | None" = None, sample_points: int = 11,
        node_budget: int = 200_000) -> Result:
    """Descend for ``steps`` updates and record every step's loss.

    Row ``i`` of ``steps`` holds the loss after ``i`` updates and the summed
    squared norms of the four gradients there (``steps + 1`` rows in total).
    ``node_counts[i]`` is the size of the loss graph at that point; a graph
    beyond ``node_budget`` nodes raises :class:`GraphTooLarge`.
    """
    grid = grid if grid is not None else make_gauss_legendre(0.0, 1.0, 24)
    f, b, t, k = initial_functions()
    loss = loss_program(f, t, grid)
    theta = [k, b, k, b]
    sample = make_uniform(0.0, 1.0, sample_points).points if sample_points > 1 else np.array([0.5])
    xs, ys = np.meshgrid(sample, sample, indexing="ij")
    out = Result()
    t0 = time.perf_counter()
    for step in range(steps + 1):
        value = loss(*theta)
        count = ops.node_count([value])
        if count > node_budget:
            raise GraphTooLarge(f"step {step}: loss graph has {count} nodes, budget is {node_budget}")
        out.node_counts.append(count)
        with memo.session():
            lv = float(value)
            kv = np.broadcast_to(theta[0](xs, ys), xs.shape)
        out.kernel.extend((step, float(x), float(y), float(v))
                          for x, y, v in zip(xs.ravel(), ys.ravel(), kv.ravel()))
        _, vjp = op_vjp(loss, *theta, grids=grid)
        grads = vjp(ops.constant(1.0, ()))
        with memo.session():
            gn = sum(squared_norm(g, grid) for g in grads)
        out.steps.append((step, lv, gn))
        if step == steps:
            break
        theta = [p - step_size * g for p, g in zip(theta, grads)]
    out.graph_roots = [loss(*theta)]
    out.extra = {"node_counts": out.node_counts, "optimize_seconds": time.perf_counter() - t0}
    return out
