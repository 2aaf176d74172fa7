"""Call caching for function-value evaluation.

Evaluating a composed graph interpretively calls every sub-function on the
arguments its parent hands it.  A shared sub-function reached along several
paths would be recomputed once per path; with a :class:`CallCache` active
each ``(node, argument bytes)`` pair is computed at most once per session.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import hashlib
import io
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_CAPACITY = 2 ** 16


def digest_args(args: Sequence[np.ndarray]) -> bytes:
    """128-bit digest of the canonical little-endian bytes and shapes of ``args``."""
    h = hashlib.blake2b(digest_size=16)
    for a in args:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.digest()


class CallCache:
    """Bounded LRU map ``(node id, argument digest) -> result`` with exact counters.

    The full argument bytes are stored next to each entry and compared on a
    hit, so a digest collision can never return a wrong value.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = int(capacity)
        self._store: "OrderedDict[tuple, tuple]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    @staticmethod
    def _key(node_id: str, args) -> tuple:
        return (node_id, digest_args(args))

    def lookup(self, node_id: str, args):
        key = self._key(node_id, args)
        entry = self._store.get(key)
        if entry is not None:
            stored_args, value = entry
            if len(stored_args) == len(args) and all(
                    s.shape == np.shape(a) and np.array_equal(s, a) for s, a in zip(stored_args, args)):
                self._store.move_to_end(key)
                self.hits += 1
                return key, value
        self.misses += 1
        return key, None

    def store(self, key, args, value):
        frozen = tuple(np.array(a, dtype=np.float64) for a in args)
        self._store[key] = (frozen, value)
        self._store.move_to_end(key)
        while len(self._store) > self.capacity:
            self._store.popitem(last=False)

    def clear(self):
        self._store.clear()
        self.hits = self.misses = 0


@dataclass
class Session:
    """State of one top-level evaluation: the cache (or None) and per-node call counts."""

    cache: Optional[CallCache]
    calls: Counter = field(default_factory=Counter)


_session: contextvars.ContextVar = contextvars.ContextVar("opdiff_session", default=None)
_enabled: contextvars.ContextVar = contextvars.ContextVar("opdiff_cache_enabled", default=True)


def current_session() -> Optional[Session]:
    return _session.get()


@contextlib.contextmanager
def session(cache: "CallCache | None | bool" = True):
    """Open an evaluation session.  Nested evaluations join the outer session."""
    if cache is True:
        cache = CallCache() if _enabled.get() else None
    elif cache is False:
        cache = None
    s = Session(cache)
    token = _session.set(s)
    try:
        yield s
    finally:
        _session.reset(token)


@contextlib.contextmanager
def disabled():
    """Evaluate without caching inside this block."""
    token = _enabled.set(False)
    try:
        yield
    finally:
        _enabled.reset(token)


def eval_cached(f, args: Sequence, cache: "CallCache | None" = None):
    """Evaluate function value ``f`` at ``args`` inside a fresh session using ``cache``.

    Pass ``cache=None`` for a new default cache.  Returns the value.
    """
    cache = CallCache() if cache is None else cache
    with session(cache):
        return f(*args)


def count_calls(f, args: Sequence, node, cached: bool = True) -> int:
    """How many times ``node`` was evaluated while computing ``f(*args)``."""
    with session(CallCache() if cached else None) as s:
        f(*args)
    return s.calls[node.id]


def nested_family(depth: int, outer=None, left=None, right=None, inner=None):
    """``h_0 = inner``; ``h_i = left(h_{i-1}) + right(h_{i-1})``.

    Defaults: ``inner = sin``, ``left = exp``, ``right = tanh``.  Returns
    ``(h_depth, h_0)``.
    """
    from . import operators as ops

    h0 = inner if inner is not None else ops.function(lambda x: ops.E.sin(x), "F[f[],f[]]")
    f = left if left is not None else ops.function(lambda x: ops.E.exp(x), "F[f[],f[]]")
    g = right if right is not None else ops.function(lambda x: ops.E.tanh(x), "F[f[],f[]]")
    h = h0
    for _ in range(depth):
        h = ops.compose(f, [h]) + ops.compose(g, [h])
    return h, h0


def depth_benchmark(depth_max: int, repeats: int = 3, x: float = 0.0):
    """Rows ``(depth, calls_cached, calls_naive, seconds_cached, seconds_naive)``.

    Call counts are those of the innermost function; times are the best of
    ``repeats`` evaluations at ``x``.
    """
    if depth_max < 1:
        raise ValueError("depth_max must be at least 1")
    rows = []
    arg = np.array(x, dtype=np.float64)
    for d in range(1, depth_max + 1):
        h, h0 = nested_family(d)
        cached = count_calls(h, [arg], h0, cached=True)
        naive = count_calls(h, [arg], h0, cached=False)
        t_cached = _best_time(lambda: eval_cached(h, [arg]), repeats)

        def run_naive():
            with session(None):
                h(arg)

        t_naive = _best_time(run_naive, repeats)
        rows.append((d, cached, naive, t_cached, t_naive))
    return rows


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


CSV_HEADER = ("depth", "calls_cached", "calls_naive", "seconds_cached", "seconds_naive")


def benchmark_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for d, c, n, tc, tn in rows:
        w.writerow([d, c, n, f"{tc:.6e}", f"{tn:.6e}"])
    return buf.getvalue()
