"""Spike-driven linear layer.

Inputs are rate-encoded into ternary spikes, so every per-step product
``W @ s(t)`` reduces to adding and subtracting weight columns.  The layer
returns the time-averaged postsynaptic drive ``H / T = W (S_pre / T) + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .neuron import encode_rate
from .tensor import DTYPE, DimensionError, as_tensor


def spike_matvec(weight, spikes) -> np.ndarray:
    """``weight @ spikes`` for a ternary spike vector via column gathers."""
    W = np.asarray(weight)
    s = np.asarray(spikes)
    if W.ndim != 2 or s.shape != (W.shape[1],):
        raise DimensionError(f"weight {W.shape} does not match spikes {s.shape}")
    if not np.all((s == 1) | (s == 0) | (s == -1)):
        raise ValueError("spike vector must be ternary")
    pos = W[:, s == 1].astype(np.float64).sum(axis=1)
    neg = W[:, s == -1].astype(np.float64).sum(axis=1)
    return pos - neg


def spike_accumulate(weight, spikes) -> np.ndarray:
    """Signed accumulation ``sum_t W @ s(t)`` for spikes of shape ``(T, ..., in)``.

    Each step's product has only 0/+-1 coefficients, so it is an exact
    selection of weight entries; the steps are summed in time order.
    """
    W = np.asarray(weight, dtype=np.float64)
    s = np.asarray(spikes)
    if s.shape[-1] != W.shape[1]:
        raise DimensionError(f"spikes {s.shape} do not match weight {W.shape}")
    T = s.shape[0]
    flat = s.reshape(T, -1, s.shape[-1])
    H = np.zeros((flat.shape[1], W.shape[0]))
    # bounded working set: a few steps per chunk
    chunk = max(1, int(2**22 // max(1, flat.shape[1] * W.shape[0])))
    Wt = W.T
    for t0 in range(0, T, chunk):
        block = flat[t0 : t0 + chunk].astype(np.float64)
        per_step = block @ Wt
        for h in per_step:
            H += h
    return H.reshape(s.shape[1:-1] + (W.shape[0],))


@dataclass
class SynapsisLayer:
    weight: np.ndarray
    bias: np.ndarray
    scaling_factor: float
    T: int

    def __post_init__(self):
        self.weight = as_tensor(self.weight, name="weight", ndim=(2,))
        self.bias = as_tensor(self.bias, name="bias", ndim=(1,))
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError("bias length must equal the number of output rows")
        if not self.scaling_factor > 0:
            raise ValueError("scaling_factor must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def synapsis_forward(layer: SynapsisLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.weight.shape[1]:
        raise DimensionError(f"input {x.shape} does not match weight {layer.weight.shape}")
    scaled = x / layer.scaling_factor
    if np.any(np.abs(scaled) > 1.0):
        raise ValueError("input exceeds the layer's scaling_factor; |x / scaling_factor| must be <= 1")
    train = encode_rate(scaled, layer.T)
    H = spike_accumulate(layer.weight, train.spikes)
    return (H / layer.T + layer.bias).astype(DTYPE)


class Synapsis(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`synapsis_forward`.

    ``fit`` calibrates ``scaling_factor_`` as the max-abs of the calibration
    inputs; inputs beyond it saturate at ``+-T`` spikes at transform time.
    """

    def __init__(self, weight=None, bias=None, T: int = 7):
        self.weight = weight
        self.bias = bias
        self.T = T

    def fit(self, X, y=None):
        X = as_tensor(X, name="X", ndim=(1, 2))
        m = float(np.max(np.abs(X)))
        self.scaling_factor_ = m if m > 0 else 1.0
        W = as_tensor(self.weight, name="weight", ndim=(2,))
        b = np.zeros(W.shape[0], DTYPE) if self.bias is None else self.bias
        self.layer_ = SynapsisLayer(W, b, self.scaling_factor_, self.T)
        return self

    def transform(self, X):
        if not hasattr(self, "layer_"):
            raise AttributeError("Synapsis is not fitted yet; call fit first")
        X = np.asarray(X, dtype=np.float64)
        clipped = np.clip(X, -self.scaling_factor_, self.scaling_factor_)
        return synapsis_forward(self.layer_, clipped)
