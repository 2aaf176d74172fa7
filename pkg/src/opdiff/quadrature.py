"""Quadrature grids: the points and weights behind every integral and inner product."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .errors import ConvergenceFailure, InvalidRange, ShapeMismatch


@dataclass(frozen=True, eq=False)
class Grid:
    """Points ``(n, *point_shape)`` with positive weights ``(n,)``.

    ``domain`` holds ``(a, b)`` per axis; ``kind`` is ``uniform``,
    ``gauss_legendre``, ``product`` or ``supplied``.
    """

    points: np.ndarray
    weights: np.ndarray
    kind: str = "supplied"
    domain: Tuple[Tuple[float, float], ...] = ()
    digest: str = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if pts.ndim == 0:
            pts = pts.reshape(1)
        if len(w) < 1 or pts.shape[0] != len(w):
            raise ShapeMismatch(f"{pts.shape[0]} points but {len(w)} weights")
        if not np.all(w > 0):
            raise InvalidRange("quadrature weights must be positive")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{self.kind}:{pts.shape}".encode())
        h.update(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        object.__setattr__(self, "digest", h.hexdigest())

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def point_shape(self) -> Tuple[int, ...]:
        return tuple(self.points.shape[1:])

    def integrate_values(self, values) -> np.ndarray:
        """``sum_i w_i values[i]`` for values sampled at the grid points."""
        values = np.asarray(values, dtype=np.float64)
        w = self.weights.reshape((-1,) + (1,) * (values.ndim - 1))
        return np.sum(w * values, axis=0)

    @classmethod
    def from_config(cls, cfg: dict) -> "Grid":
        """Build from ``{"kind", "a", "b", "n"}`` or ``{"points", "weights"}``."""
        if "points" in cfg:
            return cls(np.asarray(cfg["points"], float), np.asarray(cfg["weights"], float), "supplied")
        kind = cfg.get("kind", "uniform")
        if kind == "uniform":
            return make_uniform(cfg["a"], cfg["b"], cfg["n"])
        if kind == "gauss_legendre":
            return make_gauss_legendre(cfg["a"], cfg["b"], cfg["n"])
        raise InvalidRange(f"unknown grid kind {kind!r}")

    def to_config(self) -> dict:
        if self.kind in ("uniform", "gauss_legendre") and len(self.domain) == 1:
            a, b = self.domain[0]
            return {"kind": self.kind, "a": a, "b": b, "n": self.n}
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}


def _check_range(a: float, b: float, n: int):
    if not (math.isfinite(a) and math.isfinite(b)) or not a < b:
        raise InvalidRange(f"need a < b, got [{a}, {b}]")
    if int(n) != n or n < 1:
        raise InvalidRange(f"need n >= 1 points, got {n}")


def make_uniform(a: float, b: float, n: int) -> Grid:
    """Midpoint rule: ``n`` cell centres with equal weights ``(b - a) / n``."""
    _check_range(a, b, n)
    n = int(n)
    h = (b - a) / n
    pts = a + h * (np.arange(n) + 0.5)
    return Grid(pts, np.full(n, h), "uniform", ((float(a), float(b)),))


def _legendre(n: int, x: np.ndarray):
    """P_n(x) and P_n'(x) by the three-term recurrence."""
    p0, p1 = np.ones_like(x), x.copy()
    if n == 0:
        return p0, np.zeros_like(x)
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


def gauss_legendre_nodes(n: int, tol: float = 1e-14, max_iter: int = 100):
    """Nodes and weights of the n-point rule on [-1, 1] by Newton's method."""
    if n < 1:
        raise InvalidRange("need at least one node")
    if n == 1:
        return np.array([0.0]), np.array([2.0])
    i = np.arange(1, n + 1)
    x = np.cos(np.pi * (i - 0.25) / (n + 0.5))
    for _ in range(max_iter):
        p, dp = _legendre(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) <= tol:
            break
    else:
        raise ConvergenceFailure(f"Legendre root iteration did not reach {tol} in {max_iter} steps (n={n})")
    _, dp = _legendre(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


def make_gauss_legendre(a: float, b: float, n: int) -> Grid:
    _check_range(a, b, n)
    x, w = gauss_legendre_nodes(int(n))
    half = 0.5 * (b - a)
    return Grid(0.5 * (a + b) + half * x, half * w, "gauss_legendre", ((float(a), float(b)),))


def product_grid(*grids: Grid) -> Grid:
    """Tensor product of scalar-point grids; points have shape ``(len(grids),)``."""
    for g in grids:
        if g.point_shape != ():
            raise ShapeMismatch("product grids are built from one-dimensional grids")
    mesh = np.meshgrid(*[g.points for g in grids], indexing="ij")
    wmesh = np.meshgrid(*[g.weights for g in grids], indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    w = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=-1), axis=-1)
    domain = tuple(d for g in grids for d in g.domain)
    return Grid(pts, w, "product", domain)


def inner_product(f, g, grid: "Grid | Sequence[Grid]") -> float:
    """``sum_i w_i <f(x_i), g(x_i)>`` with tensor values contracted elementwise.

    For functions of several arguments pass one grid per argument; the sum
    runs over their tensor product.
    """
    grids = [grid] if isinstance(grid, Grid) else list(grid)
    fs, gs = f.signature, g.signature
    if fs.args != gs.args:
        raise ShapeMismatch(f"inner product of {fs} and {gs}: argument lists differ")
    if fs.rets != gs.rets:
        raise ShapeMismatch(f"inner product of {fs} and {gs}: return shapes differ")
    if len(grids) != fs.arity:
        raise ShapeMismatch(f"{fs} takes {fs.arity} arguments, got {len(grids)} grids")
    for i, (gr, s) in enumerate(zip(grids, fs.args)):
        if gr.point_shape != s:
            raise ShapeMismatch(f"grid {i} has points of shape {gr.point_shape}, argument is {s}")
    args, w = mesh_args(grids)
    fv, gv = f(*args), g(*args)
    if not isinstance(fv, tuple):
        fv, gv = (fv,), (gv,)
    total = 0.0
    for a, b, r in zip(fv, gv, fs.rets):
        a = np.broadcast_to(a, w.shape + r)
        b = np.broadcast_to(b, w.shape + r)
        prod = (a * b).reshape(w.shape + (-1,)).sum(axis=-1)
        total += float(np.sum(w * prod))
    return total


def mesh_args(grids: Sequence[Grid]):
    """Broadcastable argument arrays and joint weights for a product of grids.

    Argument ``k`` gets shape ``(1,..,n_k,..,1, *point_shape)``.
    """
    m = len(grids)
    args = []
    w = np.ones((1,) * m)
    for k, gr in enumerate(grids):
        lead = [1] * m
        lead[k] = gr.n
        args.append(gr.points.reshape(tuple(lead) + gr.point_shape))
        w = w * gr.weights.reshape(lead)
    return args, w
