"""Function approximation with banks of CustomNeurons.

A CustomNeuron integrates a constant input with membrane decay, fires
amplitude-weighted spikes against an adaptive threshold and resets by
subtraction.  Its accumulated output over a fixed number of steps is a
staircase function of the input; a bank routes each input to the neuron
that owns its segment of the domain.  Banks approximate ``x**2`` and
``sqrt(x)`` (for RMS normalisation) and SiLU.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .tensor import DTYPE, Rng

log = logging.getLogger(__name__)

KINDS = ("square", "sqrt", "silu_pos", "silu_neg", "custom")

# Search box for one neuron, in units of the segment magnitude max(|x|).
THETA_RANGE = (-2.0, 2.0)
POSITIVE_THETA_RANGE = (0.005, 2.0)
ALPHA_RANGE = (0.0, 1.0)
DECAY_RANGE = (0.3, 1.0)


class FitError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class CustomNeuronParams:
    amplitude_pos: float
    amplitude_neg: float
    theta_base: float
    alpha: float
    decay: float = 1.0
    steps: int = 64

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


TARGETS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "square": np.square,
    "sqrt": np.sqrt,
    "silu": silu,
    "zero": np.zeros_like,
}


def spike_counts(x, theta_base, alpha, decay, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative spike counts for constant inputs (all args broadcast)."""
    x = np.asarray(x, dtype=np.float64)
    theta_base = np.asarray(theta_base, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    decay = np.asarray(decay, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, theta_base.shape, alpha.shape, decay.shape)
    v = np.zeros(shape)
    n_pos = np.zeros(shape)
    n_neg = np.zeros(shape)
    for t in range(1, steps + 1):
        v = v * decay + x
        theta = theta_base + alpha * t
        pos = v >= theta
        neg = ~pos & (v <= -theta)
        v = np.where(pos, v - theta, np.where(neg, v + theta, v))
        n_pos += pos
        n_neg += neg
    return n_pos, n_neg


def custom_neuron_run(params: CustomNeuronParams, x) -> float | np.ndarray:
    """Accumulated amplitude-weighted output of one neuron for constant input ``x``."""
    n_pos, n_neg = spike_counts(x, params.theta_base, params.alpha, params.decay, params.steps)
    out = params.amplitude_pos * n_pos + params.amplitude_neg * n_neg
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ApproximatorBank:
    """Fitted neurons plus the segment layout that routes inputs to them.

    ``params`` rows are ``(a_pos, a_neg, theta_base, alpha, decay)`` and
    ``segment`` names the segment each row serves.  A segment normally has
    one neuron; the first SiLU segment sums two.
    """

    kind: str
    bounds: np.ndarray
    params: np.ndarray
    segment: np.ndarray
    steps: int = 64
    partition: str = "uniform"
    tail: str = "clamp"
    tail_slope: float = 0.0
    mse: float = float("nan")
    _table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # values are held at float32 precision so a saved bank reloads exactly
        self.bounds = np.asarray(self.bounds, dtype=np.float32).astype(np.float64)
        self.params = np.asarray(self.params, dtype=np.float32).astype(np.float64).reshape(-1, 5)
        self.tail_slope = float(np.float32(self.tail_slope))
        self.segment = np.asarray(self.segment, dtype=np.int64)
        if np.any(np.diff(self.bounds) <= 0):
            raise ValueError("segment bounds must be strictly increasing")
        n_seg = len(self.bounds) - 1
        if len(self.segment) != len(self.params):
            raise ValueError("one segment index per neuron is required")
        per_seg = np.bincount(self.segment, minlength=n_seg)
        if len(per_seg) != n_seg or np.any(per_seg == 0):
            raise ValueError("every segment needs at least one neuron")
        if self.tail not in ("clamp", "linear"):
            raise ValueError(f"unknown tail policy {self.tail!r}")
        table = -np.ones((n_seg, int(per_seg.max())), dtype=np.int64)
        fill = np.zeros(n_seg, dtype=np.int64)
        for k, s in enumerate(self.segment):
            table[s, fill[s]] = k
            fill[s] += 1
        self._table = table

    @property
    def n_segments(self) -> int:
        return len(self.bounds) - 1

    @property
    def neurons(self) -> list[CustomNeuronParams]:
        return [CustomNeuronParams(*row, steps=self.steps) for row in self.params]

    @property
    def lo(self) -> float:
        return float(self.bounds[0])

    @property
    def hi(self) -> float:
        return float(self.bounds[-1])


def _segment_index(bank: ApproximatorBank, x: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(bank.bounds, x, side="right") - 1
    return np.clip(idx, 0, bank.n_segments - 1)


def _eval_clamped(bank: ApproximatorBank, x: np.ndarray) -> np.ndarray:
    xc = np.clip(x, bank.lo, bank.hi)
    seg = _segment_index(bank, xc)
    out = np.zeros(xc.shape)
    for slot in range(bank._table.shape[1]):
        k = bank._table[seg, slot]
        present = k >= 0
        p = bank.params[np.where(present, k, 0)]
        n_pos, n_neg = spike_counts(xc, p[..., 2], p[..., 3], p[..., 4], bank.steps)
        out += np.where(present, p[..., 0] * n_pos + p[..., 1] * n_neg, 0.0)
    return out


def approx_eval(bank: ApproximatorBank, x):
    """Evaluate the bank; inputs outside the fitted interval clamp to its edge
    unless the bank carries a linear tail above its upper edge."""
    xa = np.asarray(x, dtype=np.float64)
    out = _eval_clamped(bank, xa)
    if bank.tail == "linear":
        above = xa > bank.hi
        if np.any(above):
            out = np.where(above, out + bank.tail_slope * (xa - bank.hi), out)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _amplitudes(n_pos, n_neg, f, nonneg: bool):
    """Least-squares amplitudes per candidate row (closed-form 2x2 solve)."""
    pp = (n_pos * n_pos).sum(-1)
    pq = (n_pos * n_neg).sum(-1)
    qq = (n_neg * n_neg).sum(-1)
    pf = (n_pos * f).sum(-1)
    qf = (n_neg * f).sum(-1)
    M = np.stack([np.stack([pp, pq], -1), np.stack([pq, qq], -1)], -2)
    a = np.einsum("gij,gj->gi", np.linalg.pinv(M), np.stack([pf, qf], -1))
    if nonneg:
        # refit the positive column alone where the joint solution went negative
        a_pos_only = np.where(pp > 0, pf / np.where(pp > 0, pp, 1.0), 0.0)
        a = np.where((a < 0).any(-1, keepdims=True), np.stack([np.maximum(a_pos_only, 0.0), np.zeros_like(pp)], -1), a)
        a = np.maximum(a, 0.0)
    return a


@dataclass
class _NeuronFit:
    params: np.ndarray  # a_pos, a_neg, theta, alpha, decay
    loss: float


def _fit_neuron(
    xs: np.ndarray,
    f: np.ndarray,
    steps: int,
    rng: Rng,
    *,
    positive: bool = False,
    min_left: float | None = None,
    x_left: float | None = None,
    levels: int = 4,
    top_k: int = 4,
) -> _NeuronFit:
    """Grid search with refinement over (theta, alpha, decay); amplitudes in closed form.

    ``positive`` restricts to positive thresholds and non-negative amplitudes.
    With ``min_left`` the neuron's output at ``x_left`` must be at least
    ``min_left`` (keeps a bank non-decreasing across segment edges).
    """
    m = max(float(np.max(np.abs(xs))), 1e-300)
    th_lo, th_hi = POSITIVE_THETA_RANGE if positive else THETA_RANGE
    spans = np.array([th_hi - th_lo, ALPHA_RANGE[1] - ALPHA_RANGE[0], DECAY_RANGE[1] - DECAY_RANGE[0]])
    lo = np.array([th_lo, ALPHA_RANGE[0], DECAY_RANGE[0]])
    hi = np.array([th_hi, ALPHA_RANGE[1], DECAY_RANGE[1]])

    grids = [np.linspace(th_lo, th_hi, 13), np.linspace(*ALPHA_RANGE, 9), np.linspace(*DECAY_RANGE, 8)]
    cand = np.stack([g.ravel() for g in np.meshgrid(*grids, indexing="ij")], -1)
    cand = np.concatenate([cand, lo + spans * rng.uniform(3 * 64).reshape(64, 3)])
    step = spans / np.array([12, 8, 7])

    xs_eval = xs if x_left is None else np.concatenate([xs, [x_left]])
    best: _NeuronFit | None = None
    for level in range(levels):
        th = cand[:, 0:1] * m
        al = cand[:, 1:2] * m
        de = cand[:, 2:3]
        n_pos, n_neg = spike_counts(xs_eval[None, :], th, al, de, steps)
        fit_p, fit_n = n_pos[:, : len(xs)], n_neg[:, : len(xs)]
        amp = _amplitudes(fit_p, fit_n, f, positive)
        if min_left is not None:
            # smallest a_pos raise that lifts the left-edge output to min_left;
            # the loss is convex in a_pos so this is the constrained optimum
            left_out = amp[:, 0] * n_pos[:, -1] + amp[:, 1] * n_neg[:, -1]
            short = np.maximum(min_left - left_out, 0.0)
            amp[:, 0] += np.where(n_pos[:, -1] > 0, short / np.maximum(n_pos[:, -1], 1.0), 0.0)
            left_out = amp[:, 0] * n_pos[:, -1] + amp[:, 1] * n_neg[:, -1]
        pred = amp[:, 0:1] * fit_p + amp[:, 1:2] * fit_n
        loss = ((pred - f) ** 2).mean(-1)
        if min_left is not None:
            loss = np.where(left_out >= min_left, loss, np.inf)
        order = np.argsort(loss, kind="stable")
        k0 = order[0]
        if np.isfinite(loss[k0]) and (best is None or loss[k0] < best.loss):
            th_v, al_v, de_v = cand[k0]
            best = _NeuronFit(np.array([amp[k0, 0], amp[k0, 1], th_v * m, al_v * m, de_v]), float(loss[k0]))
        if level == levels - 1:
            break
        step = step / 3.0
        offsets = np.stack(
            [g.ravel() for g in np.meshgrid(*(np.arange(-3, 4),) * 3, indexing="ij")], -1
        ) * step
        seeds = cand[order[:top_k][np.isfinite(loss[order[:top_k]])]]
        if len(seeds) == 0:
            seeds = cand[order[:top_k]]
        cand = np.clip((seeds[:, None, :] + offsets[None]).reshape(-1, 3), lo, hi)
        cand = np.unique(cand, axis=0)

    if best is None:
        raise FitError("no candidate satisfied the segment-edge constraint",
                       {"x_left": x_left, "min_left": min_left})
    return best


def make_bounds(interval, n_segments: int, partition) -> tuple[np.ndarray, str]:
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise ValueError(f"degenerate interval {interval}")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    i = np.arange(n_segments + 1) / n_segments
    if partition in ("uniform", None):
        return lo + (hi - lo) * i, "uniform"
    if partition == "log":
        if lo <= 0:
            raise ValueError("a logarithmic partition needs a positive lower edge")
        return lo * (hi / lo) ** i, "log"
    if isinstance(partition, tuple) and partition[0] == "power":
        p = float(partition[1])
        return lo + (hi - lo) * i**p, f"power:{p:g}"
    edges = np.asarray(partition, dtype=np.float64)
    if edges.ndim == 1 and len(edges) >= 2:
        return edges, "fixed"
    raise ValueError(f"unknown partition {partition!r}")


def fit_bank(
    target,
    interval,
    n_segments: int,
    partition="uniform",
    sample_count: int = 48,
    rng: Rng | None = None,
    *,
    kind: str = "custom",
    steps: int = 64,
    neurons_per_segment=None,
    positive: bool = False,
    monotone: bool = False,
    tail: str = "clamp",
    mse_ceiling: float | None = None,
    eval_points: int = 2001,
) -> ApproximatorBank:
    """Fit one neuron (or a small additive group) per segment to ``target``.

    Every segment is fitted independently on ``sample_count`` uniform points
    by minimising the mean squared error.  ``monotone`` fits segments left
    to right and forbids a drop at each edge.  The returned bank records its
    MSE on a uniform grid of ``eval_points`` over the whole interval.
    """
    fn = TARGETS[target] if isinstance(target, str) else target
    rng = rng if rng is not None else Rng(0)
    bounds, part_name = make_bounds(interval, n_segments, partition)
    n_seg = len(bounds) - 1
    per_seg = [1] * n_seg if neurons_per_segment is None else list(neurons_per_segment)
    if len(per_seg) != n_seg or min(per_seg) < 1:
        raise ValueError("neurons_per_segment must give a positive count for every segment")

    rows, seg_ids = [], []
    prev_right = None
    for s in range(n_seg):
        u, v = bounds[s], bounds[s + 1]
        xs = np.linspace(u, v, sample_count)
        f = fn(xs)
        fits: list[_NeuronFit] = []
        residual = f.copy()
        for _ in range(per_seg[s]):
            nf = _fit_neuron(xs, residual, steps, rng, positive=positive)
            fits.append(nf)
            residual = residual - _neuron_out(nf.params, xs, steps)
        if monotone and prev_right is not None and per_seg[s] == 1:
            if _neuron_out(fits[0].params, np.array([u]), steps)[0] < prev_right:
                fits = [_fit_neuron(xs, f, steps, rng, positive=positive, min_left=prev_right, x_left=u)]
        # coordinate descent over summed neurons
        for _ in range(2 if per_seg[s] > 1 else 0):
            for j in range(len(fits)):
                others = sum(_neuron_out(g.params, xs, steps) for i, g in enumerate(fits) if i != j)
                fits[j] = _fit_neuron(xs, f - others, steps, rng, positive=positive)
        for nf in fits:
            rows.append(nf.params)
            seg_ids.append(s)
        if monotone:
            below_edge = np.nextafter(v, u)
            prev_right = float(sum(_neuron_out(nf.params, np.array([below_edge]), steps)[0] for nf in fits))

    bank = ApproximatorBank(kind, bounds, np.array(rows), np.array(seg_ids), steps, part_name, tail)
    if tail == "linear":
        u, v = bounds[-2], bounds[-1]
        xs = np.linspace(u, v, sample_count)
        bank.tail_slope = float(np.float32(np.polyfit(xs, approx_eval(bank, xs), 1)[0]))
    grid = np.linspace(bounds[0], bounds[-1], eval_points)
    bank.mse = float(np.mean((approx_eval(bank, grid) - fn(grid)) ** 2))
    if mse_ceiling is not None and not bank.mse <= mse_ceiling:
        raise FitError(
            f"{kind} bank MSE {bank.mse:.3g} exceeds ceiling {mse_ceiling:.3g}",
            {"kind": kind, "mse": bank.mse, "ceiling": mse_ceiling, "segments": n_seg},
        )
    return bank


def _neuron_out(params: np.ndarray, xs: np.ndarray, steps: int) -> np.ndarray:
    n_pos, n_neg = spike_counts(xs, params[2], params[3], params[4], steps)
    return params[0] * n_pos + params[1] * n_neg


# ---------------------------------------------------------------------------
# composite operators
# ---------------------------------------------------------------------------

SILU_NEG_CUTOFF = -6.0


def silu_approx(pos_bank: ApproximatorBank, neg_bank: ApproximatorBank, x):
    """Piecewise spiking SiLU: positive bank for ``x >= 0``, negative bank on
    ``[-6, 0)`` and exactly zero below ``-6``."""
    xa = np.asarray(x, dtype=np.float64)
    out = np.zeros(xa.shape)
    pos = xa >= 0
    mid = (xa < 0) & (xa >= SILU_NEG_CUTOFF)
    if np.any(pos):
        out[pos] = approx_eval(pos_bank, xa[pos])
    if np.any(mid):
        out[mid] = approx_eval(neg_bank, xa[mid])
    return float(out) if out.ndim == 0 else out


def snn_rmsnorm(x, w, eps: float, square_bank: ApproximatorBank, sqrt_bank: ApproximatorBank, input_scale: float = 1.0):
    """RMS normalisation with spiking square and square-root.

    ``input_scale`` divides the input before squaring so it lands in the
    square bank's domain; the root is rescaled afterwards, which leaves the
    result unchanged for exact square/sqrt.  Works along the last axis.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c = float(input_scale)
    sq = approx_eval(square_bank, np.abs(x) / c)
    mu = np.mean(sq, axis=-1, keepdims=True)
    root = np.asarray(approx_eval(sqrt_bank, mu + eps / (c * c)))
    bad = root <= 0
    if np.any(bad):
        log.warning("sqrt bank returned a non-positive root for %d vector(s); using exact sqrt", int(bad.sum()))
        root = np.where(bad, np.sqrt(mu + eps / (c * c)), root)
    return x / (c * root) * w


def rmsnorm(x, w, eps: float):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * np.asarray(w, dtype=np.float64)


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

DEFAULTS = {
    "steps": 64,
    "sample_count": 48,
    "square_interval": (0.0, 4.0),
    "square_segments": 16,
    "square_power": 1.5,
    "sqrt_interval": (1e-4, 16.0),
    "sqrt_segments": 48,
    "silu_pos_edges": (0.0, 1.0, 8.0),
    "silu_neg_edges": (-6.0, -4.0, -2.0, 0.0),
    "square_mse_ceiling": 1e-2,
    "silu_mse_ceiling": 1e-2,
    "sqrt_rel_ceiling": 0.05,
}


def sqrt_relative_error(bank: ApproximatorBank, lo: float | None = None, n: int = 2001) -> float:
    """Max relative error on a log grid from ``lo`` (default ``10 x_start``) to the upper edge."""
    lo = 10 * bank.lo if lo is None else lo
    grid = np.geomspace(lo, bank.hi, n)
    return float(np.max(np.abs(approx_eval(bank, grid) - np.sqrt(grid)) / np.sqrt(grid)))


def silu_mse(pos_bank, neg_bank, lo: float = -6.0, hi: float = 4.0, n: int = 4001) -> float:
    grid = np.linspace(lo, hi, n)
    return float(np.mean((silu_approx(pos_bank, neg_bank, grid) - silu(grid)) ** 2))


def fit_default_banks(rng: Rng | None = None, settings: dict | None = None, check: bool = True) -> dict[str, ApproximatorBank]:
    """Fit the square, sqrt and the two SiLU banks used by the spiking model."""
    cfg = {**DEFAULTS, **(settings or {})}
    rng = rng if rng is not None else Rng(0)
    steps, sc = int(cfg["steps"]), int(cfg["sample_count"])
    banks = {
        "square": fit_bank(
            "square", cfg["square_interval"], int(cfg["square_segments"]), ("power", cfg["square_power"]),
            sc, rng.child("square"), kind="square", steps=steps, positive=True,
        ),
        "sqrt": fit_bank(
            "sqrt", cfg["sqrt_interval"], int(cfg["sqrt_segments"]), "log",
            sc, rng.child("sqrt"), kind="sqrt", steps=steps, positive=True, monotone=True,
        ),
        "silu_pos": fit_bank(
            "silu", (cfg["silu_pos_edges"][0], cfg["silu_pos_edges"][-1]), len(cfg["silu_pos_edges"]) - 1,
            list(cfg["silu_pos_edges"]), sc, rng.child("silu_pos"), kind="silu_pos", steps=steps,
            neurons_per_segment=[2] + [1] * (len(cfg["silu_pos_edges"]) - 2), tail="linear",
        ),
        "silu_neg": fit_bank(
            "silu", (cfg["silu_neg_edges"][0], cfg["silu_neg_edges"][-1]), len(cfg["silu_neg_edges"]) - 1,
            list(cfg["silu_neg_edges"]), sc, rng.child("silu_neg"), kind="silu_neg", steps=steps,
        ),
    }
    if check:
        check_banks(banks, cfg)
    return banks


def bank_metrics(banks: dict[str, ApproximatorBank]) -> dict[str, float]:
    """The three gated error figures of a default bank set."""
    return {
        "square_mse": banks["square"].mse,
        "sqrt_rel_err": sqrt_relative_error(banks["sqrt"]),
        "silu_mse": silu_mse(banks["silu_pos"], banks["silu_neg"]),
    }


def check_banks(banks: dict[str, ApproximatorBank], settings: dict | None = None) -> dict[str, float]:
    """Post-fit gates; raises FitError naming the first failing bank."""
    cfg = {**DEFAULTS, **(settings or {})}
    report = bank_metrics(banks)
    grid = np.linspace(banks["square"].lo, banks["square"].hi, 2001)
    if np.any(approx_eval(banks["square"], grid) < 0):
        raise FitError("square bank produced a negative output", {"kind": "square"})
    sgrid = np.geomspace(banks["sqrt"].lo, banks["sqrt"].hi, 2001)
    if np.any(np.diff(approx_eval(banks["sqrt"], sgrid)) < 0):
        raise FitError("sqrt bank is not monotone on its grid", {"kind": "sqrt"})
    if report["square_mse"] > cfg["square_mse_ceiling"]:
        raise FitError("square bank above its MSE gate", {"kind": "square", **report})
    if report["sqrt_rel_err"] > cfg["sqrt_rel_ceiling"]:
        raise FitError("sqrt bank above its relative-error gate", {"kind": "sqrt", **report})
    if report["silu_mse"] > cfg["silu_mse_ceiling"]:
        raise FitError("SiLU banks above their MSE gate", {"kind": "silu", **report})
    return report


class SpikingFunctionApproximator(RegressorMixin, BaseEstimator):
    """Estimator face of :func:`fit_bank`.

    ``fit()`` without data fits the named target on its interval; ``predict``
    evaluates the bank.
    """

    def __init__(self, target="square", interval=(0.0, 4.0), n_segments=16, partition=("power", 1.5),
                 steps=64, sample_count=48, positive=False, monotone=False, random_state=0):
        self.target = target
        self.interval = interval
        self.n_segments = n_segments
        self.partition = partition
        self.steps = steps
        self.sample_count = sample_count
        self.positive = positive
        self.monotone = monotone
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.bank_ = fit_bank(
            self.target, self.interval, self.n_segments, self.partition, self.sample_count,
            Rng(self.random_state), steps=self.steps, positive=self.positive, monotone=self.monotone,
        )
        return self

    def predict(self, X):
        if not hasattr(self, "bank_"):
            raise AttributeError("approximator is not fitted yet; call fit first")
        return np.asarray(approx_eval(self.bank_, np.asarray(X, dtype=np.float64)), dtype=DTYPE)
