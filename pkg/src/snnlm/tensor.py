"""Dense float32 arrays, a portable seeded PRNG and the few primitives the
rest of the package builds on.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float32.
Reductions accumulate in float64 and are narrowed afterwards so results do
not depend on BLAS blocking for the small integer-valued operands used in
the tests.
"""

from __future__ import annotations

import zlib

import numpy as np

DTYPE = np.float32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(x, *, name: str = "x", ndim: tuple[int, ...] | None = None) -> np.ndarray:
    """Validate ``x`` and return it as a C-contiguous float32 array.

    Raises DimensionError for zero-sized dimensions or a rank outside ``ndim``.
    """
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"{name}: every dimension must be >= 1, got shape {arr.shape}")
    if ndim is not None and arr.ndim not in ndim:
        raise DimensionError(f"{name}: expected rank in {ndim}, got {arr.ndim}")
    return arr


def check_finite(x: np.ndarray, name: str = "x") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains non-finite values")


def matmul(a, b) -> np.ndarray:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``.

    Accumulates in float64 then narrows to float32.
    """
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.ndim != 2 or b64.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a64.shape} and {b64.shape}")
    if a64.shape[1] != b64.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a64.shape} @ {b64.shape}")
    return (a64 @ b64).astype(DTYPE)


def _splitmix_block(state: int, n: int) -> tuple[np.ndarray, int]:
    """Return ``n`` successive splitmix64 outputs and the advanced state."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(state) + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z, (state + n * int(_GOLDEN)) & _MASK64


def splitmix64(x: int) -> int:
    """One splitmix64 finalisation of the integer ``x`` (used for seed derivation)."""
    z, _ = _splitmix_block((x - int(_GOLDEN)) & _MASK64, 1)
    return int(z[0])


def derive_seed(root: int, name: str) -> int:
    """Child seed for a named consumer: ``splitmix64(root XOR crc32(name))``."""
    return splitmix64((int(root) ^ zlib.crc32(name.encode("utf-8"))) & _MASK64)


class Rng:
    """splitmix64 generator.

    The stream is defined purely by 64-bit integer arithmetic, so a given seed
    yields the same values on every platform.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, state={self.state})"

    def child(self, name: str) -> "Rng":
        return Rng(derive_seed(self.seed, name))

    def next_u64(self, n: int) -> np.ndarray:
        out, self.state = _splitmix_block(self.state, int(n))
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.uniform(2 * ((n + 1) // 2)).reshape(2, -1)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        z = np.concatenate([r * np.cos(2 * np.pi * u[1]), r * np.sin(2 * np.pi * u[1])])
        return (z[:n] * std).reshape(shape).astype(DTYPE)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in [0, high) (multiply-shift; bias below 2**-32 for small ``high``)."""
        u = self.next_u64(n) >> np.uint64(32)
        return ((u * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def rand_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Tensor of the given shape with values in ``[lo, hi)``."""
    if not lo < hi:
        raise ValueError(f"rand_uniform requires lo < hi, got lo={lo}, hi={hi}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    u = rng.uniform(int(np.prod(shape))).reshape(shape)
    vals = (lo + (hi - lo) * u).astype(DTYPE)
    # float32 narrowing can round up onto ``hi``
    top = np.nextafter(DTYPE(hi), DTYPE(lo))
    return np.minimum(vals, top)
