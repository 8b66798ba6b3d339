import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnlm.attention import (
    AttentionScores,
    decode_scores,
    front_loaded,
    outer_accumulate,
    retime,
    snn_matmul,
    snn_softmax,
    spike_coincidence,
    strided,
)
from snnlm.neuron import encode_rate
from snnlm.tensor import DimensionError

count = st.integers(-16, 16)


def rounded(x, T):
    return np.sign(x) * np.minimum(T, np.floor(T * np.abs(x) + 0.5)) / T


def test_unit_product_accumulates_t_squared():
    s = snn_matmul([[1.0]], [[1.0]], 8)
    assert s.accumulated[0, 0] == 64 and decode_scores(s)[0, 0] == 1.0


def test_zero_query_gives_zero_counts():
    K = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    s = snn_matmul(np.zeros((3, 4)), K, 16)
    assert not s.accumulated.any() and not decode_scores(s).any()


@pytest.mark.parametrize("schedule", ["front_loaded", "strided"])
@pytest.mark.parametrize("T", [8, 16, 32])
def test_decode_equals_rounded_product(schedule, T):
    rng = np.random.default_rng(T)
    Q, K = rng.uniform(-2, 2, (3, 4)), rng.uniform(-3, 3, (5, 4))
    sq, sk = np.abs(Q).max(), np.abs(K).max()
    got = decode_scores(snn_matmul(Q, K, T, sq, sk, schedule))
    want = (rounded(Q / sq, T) @ rounded(K / sk, T).T * sq * sk).astype(np.float32)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(count, count)
def test_front_loaded_coincidence_min_law(a, b):
    T = 16
    got = spike_coincidence(front_loaded([[a]], T), front_loaded([[b]], T))[0, 0]
    assert got == np.sign(a) * np.sign(b) * min(abs(a), abs(b))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 16), st.integers(1, 16))
def test_strided_schedule_places_counts(m, T):
    m = min(m, T)
    tr = strided([m, -m], T)
    assert tr[:, 0].sum() == m and tr[:, 1].sum() == -m
    assert set(np.unique(tr)).issubset({-1, 0, 1})
    # spike k of m lands on step ceil(k T / m)
    fired = np.flatnonzero(tr[:, 0]) + 1
    assert fired.tolist() == [-(-k * T // m) for k in range(1, m + 1)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_outer_accumulate_is_count_product(seed, T):
    rng = np.random.default_rng(seed)
    a = encode_rate(rng.uniform(-1, 1, (2, 3)), T)
    b = encode_rate(rng.uniform(-1, 1, (4, 3)), T)
    want = a.accumulated.astype(np.int64) @ b.accumulated.astype(np.int64).T
    assert np.array_equal(outer_accumulate(a.spikes, b.spikes), want)
    assert np.all(np.abs(want) <= T * T * 3)


def test_retime_keeps_counts():
    tr = encode_rate(np.array([0.3, -0.9, 0.0]), 10)
    for sched in ("front_loaded", "strided"):
        assert np.array_equal(retime(tr, sched).accumulated, tr.accumulated)
    with pytest.raises(ValueError):
        retime(tr, "random")


def test_errors():
    with pytest.raises(ValueError):
        snn_matmul([[2.0]], [[1.0]], 4)
    with pytest.raises(DimensionError):
        snn_matmul(np.zeros((2, 3)), np.zeros((2, 4)), 4)
    with pytest.raises(ValueError):
        AttentionScores(np.zeros((1, 1)), 0)


def test_error_shrinks_with_steps():
    meds = []
    for T in (8, 16, 32, 64):
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            Q, K = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (5, 4))
            errs.append(np.abs(decode_scores(snn_matmul(Q, K, T)) - Q @ K.T).max())
        meds.append(np.median(errs))
    assert all(b <= a for a, b in zip(meds, meds[1:]))


def test_softmax_equal_row_is_uniform():
    assert np.allclose(snn_softmax(np.full((1, 4), 7)), 0.25)


def test_softmax_extreme_row():
    assert snn_softmax(np.array([[64, 0]])).tolist() == [[1.0, 0.0]]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_softmax_simplex_and_rank(seed, n):
    A = np.random.default_rng(seed).integers(-64, 65, (3, n))
    P = snn_softmax(AttentionScores(A, 8))
    assert np.all(P >= 0) and np.allclose(P.sum(-1), 1, atol=1e-6)
    for row_a, row_p in zip(A, P):
        for i in range(n):
            for j in range(n):
                if row_a[i] > row_a[j]:
                    assert row_p[i] > row_p[j] or row_p[j] == 0 and row_p[i] > 0


def test_softmax_mask_excludes_entries():
    A = np.array([[5, 1, 100]])
    P = snn_softmax(A, mask=np.array([[True, True, False]]))
    assert P.tolist() == [[1.0, 0.0, 0.0]]
    causal = np.tril(np.ones((3, 3), bool))
    P = snn_softmax(np.zeros((3, 3)), mask=causal)
    assert np.allclose(P, causal / causal.sum(-1, keepdims=True))
