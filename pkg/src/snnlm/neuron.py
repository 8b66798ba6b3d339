"""EI_IF neurons: integrate-and-fire units with an adaptive threshold that
emit ternary spikes, plus the deterministic rate code built on them.

With ``theta_base = -1/(2T)``, ``alpha = 1/T`` and a full membrane reset,
a neuron driven by a constant scaled input ``x`` fires on every step ``t``
with ``|x| >= (t - 1/2)/T``.  Its signed count is therefore
``sign(x) * min(T, floor(T|x| + 1/2))``, which coincides with the level
produced by the symmetric quantizer when ``T = 2**(b-1) - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .tensor import DTYPE, as_tensor


@dataclass(frozen=True)
class EiIfParams:
    theta_base: float
    alpha: float
    attenuation_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.attenuation_rate <= 1.0:
            raise ValueError(f"attenuation_rate must lie in [0, 1], got {self.attenuation_rate}")


@dataclass(frozen=True)
class EiIfState:
    v: float = 0.0
    t: int = 0

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("step counter must be non-negative")


@dataclass
class SpikeTrain:
    """Ternary spikes of shape ``(T, *shape)`` and their signed counts."""

    spikes: np.ndarray
    accumulated: np.ndarray = field(init=False)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.int8)
        if self.spikes.ndim < 1:
            raise ValueError("spike array needs a leading time axis")
        self.accumulated = self.spikes.sum(axis=0, dtype=np.int64)

    @property
    def T(self) -> int:
        return self.spikes.shape[0]

    def first_spike_times(self) -> np.ndarray:
        """1-based step of the first non-zero spike per element; 0 where silent."""
        fired = self.spikes != 0
        first = np.argmax(fired, axis=0) + 1
        return np.where(fired.any(axis=0), first, 0)


def rate_params(T: int) -> EiIfParams:
    """Threshold schedule that turns an EI_IF neuron into a rounding rate encoder."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return EiIfParams(theta_base=-1.0 / (2 * T), alpha=1.0 / T, attenuation_rate=1.0)


def ei_if_step(params: EiIfParams, state: EiIfState, input_current: float) -> tuple[int, EiIfState]:
    """Advance one neuron by one step and return ``(spike, new_state)``."""
    if not math.isfinite(input_current):
        raise FloatingPointError(f"non-finite input current {input_current!r}")
    t = state.t + 1
    v = state.v + input_current
    theta = params.theta_base + t * params.alpha
    if v >= theta:
        spike = 1
    elif v <= -theta:
        spike = -1
    else:
        spike = 0
    v = v * (1.0 - params.attenuation_rate)
    return spike, EiIfState(v=v, t=t)


@dataclass
class EiIfTrace:
    """Per-element statistics recorded while simulating a population."""

    train: SpikeTrain
    mean_v: np.ndarray
    # membrane potential right after integration, shape (T, *shape)
    v: np.ndarray | None = None


def run_ei_if(
    current,
    T: int,
    theta_base,
    alpha,
    attenuation_rate=1.0,
    *,
    record_v: bool = False,
) -> EiIfTrace:
    """Simulate a population of EI_IF neurons under constant input currents.

    ``theta_base``, ``alpha`` and ``attenuation_rate`` broadcast against the
    input, so every element may carry its own parameters.
    """
    x = np.asarray(current, dtype=np.float64)
    theta_base = np.asarray(theta_base, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    keep = 1.0 - np.asarray(attenuation_rate, dtype=np.float64)
    full_reset = bool(np.all(keep == 0.0))

    spikes = np.zeros((T,) + x.shape, dtype=np.int8)
    v_hist = np.empty((T,) + x.shape) if record_v else None
    v_sum = np.zeros(x.shape)
    v = np.zeros(x.shape)
    for t in range(1, T + 1):
        v = x if full_reset else v + x
        theta = theta_base + t * alpha
        pos = v >= theta
        neg = ~pos & (v <= -theta)
        spikes[t - 1] = pos.astype(np.int8) - neg.astype(np.int8)
        v_sum += v
        if record_v:
            v_hist[t - 1] = v
        if not full_reset:
            v = v * keep
    return EiIfTrace(train=SpikeTrain(spikes), mean_v=v_sum / T, v=v_hist)


def encode_rate(x, T: int, *, saturate: bool = False) -> SpikeTrain:
    """Rate-encode pre-scaled values (``|x| <= 1``) over ``T`` steps.

    With ``saturate=True`` out-of-range inputs are accepted and simply fire
    on every step, which is what the neuron does physically.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("encode_rate input contains non-finite values")
    if not saturate and np.any(np.abs(arr) > 1.0):
        raise ValueError("encode_rate expects |x| <= 1; scale the input first")
    # simulated in count units: current T x against thresholds t - 1/2, all exact
    return run_ei_if(arr * T, T, -0.5, 1.0, 1.0).train


def decode_rate(train: SpikeTrain, T: int) -> np.ndarray:
    if train.T != T:
        raise ValueError(f"train has {train.T} steps, expected {T}")
    return (train.accumulated / T).astype(DTYPE)


def rate_count(x, T: int) -> np.ndarray:
    """Closed form of the encoder's signed spike count."""
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.minimum(T, np.floor(T * np.abs(x) + 0.5))).astype(np.int64)


class RateEncoder(TransformerMixin, BaseEstimator):
    """Scale-then-encode transformer.

    ``fit`` records the max-abs of the calibration data as the scaling factor;
    ``transform`` returns the decoded rate ``count / T`` in scaled units and
    ``encode`` the raw spike train.
    """

    def __init__(self, T: int = 7, saturate: bool = True):
        self.T = T
        self.saturate = saturate

    def fit(self, X, y=None):
        X = as_tensor(X, name="X")
        m = float(np.max(np.abs(X)))
        self.scaling_factor_ = m if m > 0 else 1.0
        return self

    def encode(self, X) -> SpikeTrain:
        if not hasattr(self, "scaling_factor_"):
            raise AttributeError("RateEncoder is not fitted yet; call fit first")
        X = np.asarray(X, dtype=np.float64)
        return encode_rate(X / self.scaling_factor_, self.T, saturate=self.saturate)

    def transform(self, X):
        return decode_rate(self.encode(X), self.T)
