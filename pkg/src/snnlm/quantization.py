"""Bit-width quantizer, quantized linear layer and the straight-through
gradient rule used to train the ANN that is later converted to spikes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .tensor import DTYPE, DimensionError, as_tensor


class QuantSpecError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Quantizer configuration.

    ``narrow`` drops the extra negative level (``-2**(b-1)``) so the grid is
    symmetric; the rate code can only represent ``[-T, T]`` and the model
    uses narrow activation quantizers for that reason.
    """

    bits: int = 8
    mode: str = "symmetric"
    narrow: bool = False

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise QuantSpecError(f"bits must be an integer >= 2, got {self.bits}")
        if self.mode not in ("symmetric", "asymmetric"):
            raise QuantSpecError(f"unknown quantization mode {self.mode!r}")

    @property
    def n_levels(self) -> int:
        """Largest positive level, ``2**(b-1) - 1``."""
        return 2 ** (self.bits - 1) - 1

    @property
    def clip_lo(self) -> int:
        if self.mode == "asymmetric":
            return 0
        return -self.n_levels if self.narrow else -(2 ** (self.bits - 1))

    @property
    def clip_hi(self) -> int:
        if self.mode == "asymmetric":
            return 2**self.bits - 1
        return self.n_levels


@dataclass
class QuantResult:
    values: np.ndarray
    levels: np.ndarray
    scale: float
    zero_point: int = 0


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def symmetric_scale(x, spec: QuantSpec) -> float:
    m = float(np.max(np.abs(x)))
    return m / spec.n_levels if m > 0 else 1.0


def quantize(x, spec: QuantSpec, scale: float | None = None, zero_point: int | None = None) -> QuantResult:
    """Quantize ``x``; the scale is derived from ``max|x|`` unless frozen.

    Symmetric: ``levels = clip(round(x / s))`` and ``values = s * levels``.
    Asymmetric: ``levels = clip(round(x / s) + z)`` and ``values = s * (levels - z)``.
    """
    x64 = np.asarray(x, dtype=np.float64)
    if x64.size == 0:
        raise DimensionError("cannot quantize an empty tensor")
    if spec.mode == "symmetric":
        s = symmetric_scale(x64, spec) if scale is None else float(scale)
        z = 0
    else:
        if scale is None:
            lo, hi = min(float(x64.min()), 0.0), max(float(x64.max()), 0.0)
            s = (hi - lo) / spec.clip_hi if hi > lo else 1.0
        else:
            s = float(scale)
        z = int(round_half_away(np.array(-x64.min() / s))) if zero_point is None else int(zero_point)
        z = min(max(z, spec.clip_lo), spec.clip_hi)
    levels = np.clip(round_half_away(x64 / s) + z, spec.clip_lo, spec.clip_hi)
    values = (s * (levels - z)).astype(DTYPE)
    return QuantResult(values=values, levels=levels.astype(np.int64), scale=s, zero_point=z)


def ste_grad(upstream_grad, x, spec: QuantSpec, scale: float | None = None) -> np.ndarray:
    """Clipped straight-through gradient: identity inside the clip range, zero outside."""
    g = np.asarray(upstream_grad)
    x64 = np.asarray(x, dtype=np.float64)
    if g.shape != x64.shape:
        raise DimensionError(f"gradient shape {g.shape} != input shape {x64.shape}")
    s = symmetric_scale(x64, spec) if scale is None else float(scale)
    r = x64 / s
    inside = (r >= spec.clip_lo) & (r <= spec.clip_hi)
    return np.where(inside, g, 0).astype(g.dtype)


def qsynapsis_forward(
    weight,
    bias,
    pre_spec: QuantSpec,
    post_spec: QuantSpec,
    x,
    *,
    pre_scale: float | None = None,
    post_scale: float | None = None,
) -> QuantResult:
    """``Q_post(W Q_pre(x) + b)``; the returned result carries ``s_post``."""
    W = as_tensor(weight, name="weight", ndim=(2,))
    b = as_tensor(bias, name="bias", ndim=(1,))
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"shapes disagree: W {W.shape}, b {b.shape}, x {x.shape}")
    pre = quantize(x, pre_spec, scale=pre_scale)
    y = (pre.levels.astype(np.float64) @ W.T.astype(np.float64)) * pre.scale + b
    return quantize(y.astype(DTYPE), post_spec, scale=post_scale)


class Quantizer(TransformerMixin, BaseEstimator):
    """Per-tensor activation quantizer with a frozen calibration scale.

    ``fit`` records ``absmax_`` and ``scale_``; ``transform`` returns the
    dequantized values under that frozen scale.
    """

    def __init__(self, bits: int = 8, mode: str = "symmetric", narrow: bool = False):
        self.bits = bits
        self.mode = mode
        self.narrow = narrow

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits, self.mode, self.narrow)

    def fit(self, X, y=None):
        X = as_tensor(X, name="X")
        res = quantize(X, self.spec)
        self.scale_ = res.scale
        self.zero_point_ = res.zero_point
        self.absmax_ = float(np.max(np.abs(X)))
        return self

    def quantize(self, X) -> QuantResult:
        if not hasattr(self, "scale_"):
            raise AttributeError("Quantizer is not fitted yet; call fit first")
        return quantize(X, self.spec, scale=self.scale_, zero_point=self.zero_point_)

    def transform(self, X):
        return self.quantize(X).values
