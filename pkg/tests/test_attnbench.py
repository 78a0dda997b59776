import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mapforge.attnbench import (
    CSV_COLUMNS,
    AttnWeights,
    attention_weights,
    bench,
    decoupled_attention,
    score_entries,
    to_csv,
    vanilla_attention,
)


def _loop_attention(tokens, w):
    """One query at a time, softmax written out by hand."""
    d = tokens.shape[1]
    q, k, v = tokens @ w.wq, tokens @ w.wk, tokens @ w.wv
    out = np.zeros_like(tokens, dtype=float)
    for i in range(len(tokens)):
        s = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(len(tokens))]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        z = sum(e)
        out[i] = sum((e[j] / z) * v[j] for j in range(len(tokens)))
    return out @ w.wo


def test_score_counts_at_reference_size():
    assert score_entries("vanilla", 50, 20) == 1_000_000
    assert score_entries("decoupled", 50, 20) == 70_000
    g = np.zeros((50, 20, 4))
    w = AttnWeights.random(4)
    assert vanilla_attention(g, w)[1].score_entries == 1_000_000
    assert decoupled_attention(g, w)[1].score_entries == 70_000
    with pytest.raises(ValueError):
        score_entries("sparse", 1, 1)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(0, 1000))
def test_vanilla_matches_loop_reference(n, nv, d, seed):
    grid = np.random.default_rng(seed).normal(size=(n, nv, d))
    w = AttnWeights.random(d, seed)
    out, _ = vanilla_attention(grid, w)
    want = _loop_attention(grid.reshape(n * nv, d), w).reshape(n, nv, d)
    np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(0, 1000))
def test_decoupled_matches_loop_reference(n, nv, d, seed):
    grid = np.random.default_rng(seed).normal(size=(n, nv, d))
    w, wp = AttnWeights.random(d, seed), AttnWeights.random(d, seed + 1)
    out, _ = decoupled_attention(grid, w, wp)
    inter = np.stack([_loop_attention(grid[:, j], w) for j in range(nv)], axis=1)
    want = np.stack([_loop_attention(inter[i], wp) for i in range(n)])
    np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)


def test_single_token_is_value_projection():
    x = np.random.default_rng(0).normal(size=(1, 1, 5))
    w = AttnWeights.random(5, 3)
    np.testing.assert_allclose(vanilla_attention(x, w)[0][0, 0], x[0, 0] @ w.wv @ w.wo, rtol=1e-12)
    # two value projections in sequence for the decoupled form
    np.testing.assert_allclose(
        decoupled_attention(x, w)[0][0, 0], x[0, 0] @ w.wv @ w.wo @ w.wv @ w.wo, rtol=1e-12
    )


def test_single_instance_decoupled_is_intra_attention_of_projection():
    x = np.random.default_rng(1).normal(size=(1, 6, 4))
    w = AttnWeights.random(4, 2)
    out, _ = decoupled_attention(x, w)
    np.testing.assert_allclose(out[0], _loop_attention(x[0] @ w.wv @ w.wo, w), rtol=1e-10)


def test_identical_tokens_give_identical_rows():
    x = np.tile(np.random.default_rng(2).normal(size=4), (3, 5, 1))
    w = AttnWeights.random(4)
    for fn in (vanilla_attention, decoupled_attention):
        out = fn(x, w)[0].reshape(-1, 4)
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=1e-12)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(3).normal(size=(7, 4)) * 10
    a = attention_weights(x, AttnWeights.random(4))
    assert a.shape == (7, 7) and np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_peak_bytes_quadruple_when_n_doubles():
    w = AttnWeights.random(8)
    a = vanilla_attention(np.zeros((10, 4, 8)), w)[1].peak_score_bytes
    b = vanilla_attention(np.zeros((20, 4, 8)), w)[1].peak_score_bytes
    assert b == 4 * a == 4 * (40 * 40 * 8)


def test_float32_preserved():
    w = AttnWeights(*(m.astype(np.float32) for m in vars(AttnWeights.random(4)).values()))
    x = np.ones((2, 3, 4), dtype=np.float32)
    for fn in (vanilla_attention, decoupled_attention):
        out, _ = fn(x, w)
        assert out.dtype == np.float32
    assert vanilla_attention(x, w)[1].peak_score_bytes == 36 * 4


def test_bench_table():
    rows = bench([4, 8], nv=3, d=4)
    assert [(r.variant, r.n) for r in rows] == [("vanilla", 4), ("decoupled", 4), ("vanilla", 8), ("decoupled", 8)]
    for r in rows:
        assert r.score_entries == score_entries(r.variant, r.n, 3)
        assert r.median_seconds >= 0.0
    table = list(csv.reader(io.StringIO(to_csv(rows, timing=False))))
    assert tuple(table[0]) == CSV_COLUMNS and all(t[-1] == "" for t in table[1:])
    assert to_csv(rows, timing=False) == to_csv(bench([4, 8], nv=3, d=4), timing=False)
    with pytest.raises(ValueError):
        bench([4], repetitions=2)


def test_grid_shape_checked():
    with pytest.raises(ValueError):
        vanilla_attention(np.zeros((3, 4)), AttnWeights.random(4))
