"""Spike-domain attention kernels.

``snn_matmul`` accumulates the product of two rate-coded matrices step by
step.  On each step a spike of one operand adds or subtracts the other
operand's running spike count, so after ``T`` steps the accumulator holds
``C_Q C_K^T`` exactly (``C`` = total signed counts) using only additions.
Decoding divides by ``T**2`` and restores both scales.

``spike_coincidence`` is the plain same-step product ``sum_t S_Q(t) S_K(t)^T``.
Under the front-loaded schedule it obeys a min-law per element pair, not a
product law, which is why the cumulative form is what the kernels decode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuron import SpikeTrain, encode_rate
from .tensor import DTYPE, DimensionError

SCHEDULES = ("front_loaded", "strided")


@dataclass
class AttentionScores:
    accumulated: np.ndarray
    T: int
    scale_q: float = 1.0
    scale_k: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        self.accumulated = np.asarray(self.accumulated, dtype=np.int64)


def front_loaded(counts, T: int) -> np.ndarray:
    """Spikes for signed ``counts``: element with count ``k`` fires in steps 1..|k|."""
    c = np.asarray(counts, dtype=np.int64)
    steps = np.arange(1, T + 1).reshape((T,) + (1,) * c.ndim)
    return (np.sign(c) * (steps <= np.abs(c))).astype(np.int8)


def strided(counts, T: int) -> np.ndarray:
    """Spikes spread evenly: spike ``k`` of ``m`` lands on step ``ceil(k T / m)``."""
    c = np.asarray(counts, dtype=np.int64)
    m = np.abs(c)
    if np.any(m > T):
        raise ValueError("a count exceeds the number of steps")
    sign = np.sign(c).astype(np.int8)
    m = m.astype(np.int32)
    out = np.empty((T,) + c.shape, dtype=np.int8)
    prev = np.zeros(c.shape, dtype=np.int32)
    for t in range(1, T + 1):
        # spikes emitted by step t are floor(t m / T)
        cur = (t * m) // T
        out[t - 1] = sign * (cur - prev).astype(np.int8)
        prev = cur
    return out


def retime(train: SpikeTrain, schedule: str) -> SpikeTrain:
    if schedule == "front_loaded":
        return SpikeTrain(front_loaded(train.accumulated, train.T))
    if schedule == "strided":
        return SpikeTrain(strided(train.accumulated, train.T))
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def outer_accumulate(spikes_a, spikes_b) -> np.ndarray:
    """Cumulative spike outer product for trains ``(T, ..., m, d)`` and ``(T, ..., n, d)``.

    Returns the integer accumulator of shape ``(..., m, n)``; it equals the
    product of the two total-count matrices.
    """
    a = np.asarray(spikes_a)
    b = np.asarray(spikes_b)
    if a.shape[0] != b.shape[0] or a.shape[-1] != b.shape[-1] or a.shape[1:-2] != b.shape[1:-2]:
        raise DimensionError(f"incompatible spike trains {a.shape} and {b.shape}")
    acc = np.zeros(a.shape[1:-1] + (b.shape[-2],))
    count_a = np.zeros(a.shape[1:])
    count_b = np.zeros(b.shape[1:])
    # float64 holds these integer sums exactly (|acc| <= T^2 d < 2^53)
    for t in range(a.shape[0]):
        sa = a[t].astype(np.float64)
        sb = b[t].astype(np.float64)
        count_b += sb
        acc += sa @ np.swapaxes(count_b, -1, -2)
        acc += count_a @ np.swapaxes(sb, -1, -2)
        count_a += sa
    return acc.astype(np.int64)


def spike_coincidence(spikes_a, spikes_b) -> np.ndarray:
    """Same-step product ``sum_t S_a(t) S_b(t)^T``."""
    a = np.asarray(spikes_a, dtype=np.float64)
    b = np.asarray(spikes_b, dtype=np.float64)
    return np.einsum("t...md,t...nd->...mn", a, b).astype(np.int64)


def snn_matmul(Q, K, T: int, scale_q: float = 1.0, scale_k: float = 1.0, schedule: str = "strided") -> AttentionScores:
    """Spiking estimate of ``Q @ K.T`` for ``Q[m, d]`` and ``K[n, d]``."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"Q {Q.shape} and K {K.shape} differ in the inner dimension")
    if np.any(np.abs(Q) > scale_q) or np.any(np.abs(K) > scale_k):
        raise ValueError("|Q| / scale_q and |K| / scale_k must be <= 1")
    tq = retime(encode_rate(Q / scale_q, T), schedule)
    tk = retime(encode_rate(K / scale_k, T), schedule)
    return AttentionScores(outer_accumulate(tq.spikes, tk.spikes), T, scale_q, scale_k)


def decode_scores(scores: AttentionScores) -> np.ndarray:
    return (scores.accumulated / float(scores.T) ** 2 * (scores.scale_q * scores.scale_k)).astype(DTYPE)


def snn_softmax(scores, mask=None) -> np.ndarray:
    """Row normalisation of accumulated counts.

    Counts are shifted by the row minimum and divided by the row sum; rows
    with no spread become uniform.  ``mask`` (True = attend) excludes entries
    from both the minimum and the sum and gives them probability 0.
    """
    A = scores.accumulated if isinstance(scores, AttentionScores) else np.asarray(scores)
    A = A.astype(np.float64)
    keep = np.ones(A.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), A.shape)
    row_min = np.min(np.where(keep, A, np.inf), axis=-1, keepdims=True)
    row_min = np.where(np.isfinite(row_min), row_min, 0.0)
    shifted = np.where(keep, A - row_min, 0.0)
    total = shifted.sum(axis=-1, keepdims=True)
    n_keep = np.maximum(keep.sum(axis=-1, keepdims=True), 1)
    uniform = keep / n_keep
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(total > 0, shifted / np.where(total > 0, total, 1.0), uniform)
    return probs
