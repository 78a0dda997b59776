"""Vanilla vs decoupled self-attention over an ``N x Nv x d`` query grid.

Forward numerics only: single head, no dropout, no residual. FLOPs count a
multiply-add as 2, and each score costs 5 more for scaling, max
subtraction, exp, sum and divide. ``peak_score_bytes`` is the largest score
tensor alive at once; the two decoupled passes run one after the other.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CSV_COLUMNS = ("variant", "N", "N_v", "d", "score_entries", "flops", "peak_score_bytes", "median_seconds")


@dataclass(frozen=True, eq=False)
class AttnWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def random(cls, d: int, seed: int = 0) -> "AttnWeights":
        rng = np.random.default_rng(seed)
        return cls(*(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)) for _ in range(4)))


@dataclass
class AttnCost:
    score_entries: int = 0
    flops: int = 0
    peak_score_bytes: int = 0
    wall_time: float = 0.0

    def add_pass(self, scores: np.ndarray, tokens: int, d: int) -> None:
        self.score_entries += scores.size
        self.peak_score_bytes = max(self.peak_score_bytes, scores.nbytes)
        self.flops += 4 * 2 * tokens * d * d + 2 * 2 * scores.size * d + 5 * scores.size


def _as_grid(grid) -> np.ndarray:
    grid = np.asarray(grid)
    if not np.issubdtype(grid.dtype, np.floating):
        grid = grid.astype(float)
    if grid.ndim != 3:
        raise ValueError(f"query grid must be (N, Nv, d), got {grid.shape}")
    return grid


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _attend(x: np.ndarray, w: AttnWeights, cost: AttnCost) -> np.ndarray:
    """Attention over the second-to-last axis of ``x`` (..., L, d), batched over leading axes."""
    d = x.shape[-1]
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    cost.add_pass(scores, int(np.prod(x.shape[:-1])), d)
    attn = _softmax(scores)
    return (attn @ v) @ w.wo


def attention_weights(x: np.ndarray, w: AttnWeights) -> np.ndarray:
    """Softmax rows of a single attention pass, for inspection."""
    d = x.shape[-1]
    scores = (x @ w.wq) @ np.swapaxes(x @ w.wk, -1, -2) / math.sqrt(d)
    return _softmax(scores)


def vanilla_attention(grid, weights: AttnWeights):
    """Attention over all ``N * Nv`` queries flattened into one sequence."""
    grid = _as_grid(grid)
    n, nv, d = grid.shape
    cost = AttnCost()
    t0 = time.perf_counter()
    out = _attend(grid.reshape(n * nv, d), weights, cost).reshape(n, nv, d)
    cost.wall_time = time.perf_counter() - t0
    return out, cost


def decoupled_attention(grid, weights: AttnWeights, point_weights: AttnWeights | None = None):
    """Inter-instance pass (over N, per point slot) then intra-instance pass (over Nv, per instance).

    ``point_weights`` separates the second pass's projections; by default
    both passes share ``weights``.
    """
    grid = _as_grid(grid)
    cost = AttnCost()
    t0 = time.perf_counter()
    inter = _attend(np.swapaxes(grid, 0, 1), weights, cost)  # (Nv, N, d)
    out = _attend(np.swapaxes(inter, 0, 1), point_weights or weights, cost)  # (N, Nv, d)
    cost.wall_time = time.perf_counter() - t0
    return out, cost


def score_entries(variant: str, n: int, nv: int) -> int:
    """Closed-form score count: ``(N Nv)^2`` or ``Nv N^2 + N Nv^2``."""
    if variant == "vanilla":
        return (n * nv) ** 2
    if variant == "decoupled":
        return nv * n * n + n * nv * nv
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class BenchRow:
    variant: str
    n: int
    nv: int
    d: int
    score_entries: int
    flops: int
    peak_score_bytes: int
    median_seconds: float

    def as_tuple(self, timing: bool = True):
        t = f"{self.median_seconds:.6f}" if timing else ""
        return (self.variant, self.n, self.nv, self.d, self.score_entries, self.flops, self.peak_score_bytes, t)


def bench(
    ns: Sequence[int],
    nv: int = 20,
    d: int = 32,
    repetitions: int = 3,
    seed: int = 0,
    dtype=np.float32,
) -> list[BenchRow]:
    """Cost table for both variants at each ``N``; wall time is the median over repetitions."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    weights = AttnWeights.random(d, seed)
    weights = AttnWeights(*(np.asarray(a, dtype=dtype) for a in (weights.wq, weights.wk, weights.wv, weights.wo)))
    rows = []
    rng = np.random.default_rng(seed)
    for n in ns:
        grid = rng.normal(size=(n, nv, d)).astype(dtype)
        for name, fn in (("vanilla", vanilla_attention), ("decoupled", decoupled_attention)):
            times = []
            for _ in range(repetitions):
                _, cost = fn(grid, weights)
                times.append(cost.wall_time)
            rows.append(
                BenchRow(name, n, nv, d, cost.score_entries, cost.flops, cost.peak_score_bytes, statistics.median(times))
            )
    return rows


def to_csv(rows: Sequence[BenchRow], timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.as_tuple(timing))
    return buf.getvalue()
