"""Local plasticity for a converted spiking model.

Synaptic weights follow an STDP kernel on first-spike times, scaled by a
global factor ``G`` that compares the current task loss with a moving
baseline and restricted to synapses whose tag is set.  Neuron thresholds,
threshold growth and decay drift towards homeostatic targets.  A composite
objective collects every penalty in one number for monitoring.

Units: neuron parameters of the model are stored in count units (``T``
times the threshold, see :class:`snnlm.model.LanguageModel`), and the
homeostatic updates act in those units, which makes them commensurate with
spike counts ``S``.  Membrane averages are taken over the residual
potential that remains after each step's reset.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from .model import (
    LanguageModel,
    _loss_and_grad,
    ann_backward,
    ann_forward,
    linear_sites,
    quant_sites,
    snn_forward,
    task_loss,
)
from .tensor import DTYPE


def sigmoid(x):
    """Logistic function; exactly 0.5 at 0."""
    out = expit(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StdpParams:
    a_plus: float = 1.0
    a_minus: float = 1.0
    tau_plus: float = 4.0
    tau_minus: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


def stdp_delta(dt, p: StdpParams):
    """``A+ exp(-dt/tau+)`` for ``dt > 0``, ``-A- exp(dt/tau-)`` for ``dt <= 0``."""
    d = np.asarray(dt, dtype=np.float64)
    pos = d > 0
    out = np.where(pos, p.a_plus * np.exp(-np.where(pos, d, 0.0) / p.tau_plus),
                   -p.a_minus * np.exp(np.where(pos, 0.0, d) / p.tau_minus))
    return float(out) if out.ndim == 0 else out


@dataclass
class ModulationState:
    beta_mod: float = 1.0
    window: int = 32
    recent_losses: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self.recent_losses = deque(self.recent_losses, maxlen=self.window)

    @property
    def baseline(self) -> float | None:
        if not self.recent_losses:
            return None
        return float(np.mean(np.fromiter(self.recent_losses, dtype=np.float64)))


def global_modulation(l_task: float, m: ModulationState) -> float:
    """``G = sigmoid(beta (baseline - L_task))``; an empty window uses ``L_task`` as baseline."""
    base = m.baseline
    base = l_task if base is None else base
    return sigmoid(m.beta_mod * (base - l_task))


def update_baseline(m: ModulationState, l_task: float) -> ModulationState:
    out = ModulationState(m.beta_mod, m.window, deque(m.recent_losses))
    out.recent_losses.append(float(l_task))
    return out


def weight_update(w, delta, g: float, eta_w: float):
    """``eta_w G (delta - w)``."""
    return eta_w * g * (np.asarray(delta, dtype=np.float64) - np.asarray(w, dtype=np.float64))


@dataclass
class NeuronPlasticityState:
    """Homeostatic bookkeeping for one population (arrays are per neuron)."""

    s_bar: np.ndarray
    v_bar: np.ndarray
    s_target: float = 0.0
    v_target: float = 0.0
    v_rest: float = 0.0
    eta_theta: float = 1e-3
    eta_theta_task: float = 1e-3
    eta_alpha: float = 1e-3
    eta_alpha_task: float = 1e-3
    eta_r: float = 1e-3
    eta_r_task: float = 1e-3
    ema: float = 0.99
    homeostatic_sign_flip: bool = False

    def observe(self, s_now, v_now) -> None:
        """Fold one measurement into the running averages."""
        k = self.ema
        self.s_bar = k * np.asarray(self.s_bar, dtype=np.float64) + (1 - k) * np.asarray(s_now, dtype=np.float64)
        self.v_bar = k * np.asarray(self.v_bar, dtype=np.float64) + (1 - k) * np.asarray(v_now, dtype=np.float64)


def neuron_param_update(n: NeuronPlasticityState, g: float, grads=None):
    """``(d_theta_base, d_alpha, d_r)``.

    ``grads`` is an optional triple of task-loss gradient terms for the
    three parameters; without it those terms are zero.  The threshold term
    uses ``(S_target - S_bar)`` as written, or its negation when
    ``homeostatic_sign_flip`` is set.
    """
    s_err = np.asarray(n.s_target, dtype=np.float64) - np.asarray(n.s_bar, dtype=np.float64)
    if n.homeostatic_sign_flip:
        s_err = -s_err
    v_bar = np.asarray(n.v_bar, dtype=np.float64)
    d_theta = n.eta_theta * g * s_err
    d_alpha = n.eta_alpha * g * (v_bar - n.v_target)
    d_r = n.eta_r * g * (v_bar - n.v_rest)
    if grads is not None:
        g_theta, g_alpha, g_r = grads
        d_theta = d_theta + n.eta_theta_task * np.asarray(g_theta, dtype=np.float64)
        d_alpha = d_alpha + n.eta_alpha_task * np.asarray(g_alpha, dtype=np.float64)
        d_r = d_r + n.eta_r_task * np.asarray(g_r, dtype=np.float64)
    return d_theta, d_alpha, d_r


def expected_time_steps(spike_probs) -> float:
    """Expected first-spike step for independent per-step probabilities.

    Mass left after the last step is placed at ``len + 1``.
    """
    p = np.asarray(spike_probs, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)):
        raise ValueError("spike probabilities must lie in [0, 1]")
    survive = np.concatenate([[1.0], np.cumprod(1.0 - p)])
    steps = np.arange(1, len(p) + 1)
    return float(np.sum(steps * p * survive[:-1]) + (len(p) + 1) * survive[-1])


def spike_probability(v, theta, lambda_scale: float):
    if not lambda_scale > 0:
        raise ValueError("lambda_scale must be positive")
    return sigmoid((np.asarray(v, dtype=np.float64) - np.asarray(theta, dtype=np.float64)) / lambda_scale)


def synaptic_tag(pre_activity, post_activity, l_task: float):
    return sigmoid(np.asarray(pre_activity, dtype=np.float64) + np.asarray(post_activity, dtype=np.float64) - l_task)


@dataclass
class CompositeLossWeights:
    lambda_w: float = 1.0
    lambda_theta: float = 1.0
    lambda_alpha: float = 1.0
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0
    lambda_task: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossSnapshot:
    """Everything the composite objective reads.

    ``w``, ``delta``, ``tag`` and ``c_targets`` are lists with one entry per
    weight matrix; ``delta`` is NaN where a synapse saw no spike pair.
    """

    w: list
    delta: list
    tag: list
    c_targets: list
    s_bar: np.ndarray
    v_bar: np.ndarray
    s_target: float
    v_target: float
    v_rest: float
    t_exp: float
    t_target: float
    l_task: float


TERMS = ("w", "theta", "alpha", "r", "c", "t", "task", "reg")


def composite_loss(weights: CompositeLossWeights, snap: LossSnapshot) -> tuple[float, dict[str, float]]:
    """Weighted sum of the eight penalty terms and its per-term breakdown."""
    stdp = 0.0
    norm = 0.0
    reg = 0.0
    for w, d, tag, c in zip(snap.w, snap.delta, snap.tag, snap.c_targets):
        w = np.asarray(w, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        have = np.isfinite(d)
        stdp += float(np.sum(np.where(have, np.asarray(tag) * (w - np.where(have, d, 0.0)) ** 2, 0.0)))
        norm += float(np.sum((w.sum(axis=1) - np.asarray(c, dtype=np.float64)) ** 2))
        reg += float(np.sum(w * w))
    s_bar = np.asarray(snap.s_bar, dtype=np.float64)
    v_bar = np.asarray(snap.v_bar, dtype=np.float64)
    raw = {
        "w": stdp,
        "theta": float(np.sum((snap.s_target - s_bar) ** 2)),
        "alpha": float(np.sum((v_bar - snap.v_target) ** 2)),
        "r": float(np.sum((v_bar - snap.v_rest) ** 2)),
        "c": norm,
        "t": float((snap.t_exp - snap.t_target) ** 2),
        "task": float(snap.l_task),
        "reg": reg,
    }
    lam = {k: getattr(weights, f"lambda_{k}") for k in TERMS}
    breakdown = {k: lam[k] * raw[k] for k in TERMS}
    total = float(sum(breakdown[k] for k in TERMS))
    return total, breakdown


# ---------------------------------------------------------------------------
# fine-tuning loop
# ---------------------------------------------------------------------------


@dataclass
class PlasticityConfig:
    a_plus: float = 1.0
    a_minus: float = 1.0
    tau_plus: float = 4.0
    tau_minus: float = 4.0
    beta_mod: float = 1.0
    window: int = 32
    s_target_frac: float = 0.2
    v_target: float = 0.0
    v_rest: float = 0.0
    eta_w: float = 1e-3
    eta_theta: float = 1e-3
    eta_theta_task: float = 1e-3
    eta_alpha: float = 1e-3
    eta_alpha_task: float = 1e-3
    eta_r: float = 1e-3
    eta_r_task: float = 1e-3
    ema: float = 0.99
    tag_threshold: float = 0.5
    t_target_frac: float = 0.5
    lambda_scale: float = 0.0  # 0 means one count level, 1/T
    task_gradient: str = "descent"
    homeostatic_sign_flip: bool = False
    loss_ema: float = 0.9
    loss_weights: CompositeLossWeights = field(default_factory=CompositeLossWeights)

    def __post_init__(self):
        if self.task_gradient not in ("descent", "as_written", "off"):
            raise ValueError("task_gradient must be 'descent', 'as_written' or 'off'")
        if not 0 <= self.ema < 1 or not 0 <= self.loss_ema < 1:
            raise ValueError("EMA factors must lie in [0, 1)")

    @property
    def stdp(self) -> StdpParams:
        return StdpParams(self.a_plus, self.a_minus, self.tau_plus, self.tau_minus)

    @property
    def zero_rates(self) -> bool:
        return all(getattr(self, f.name) == 0 for f in fields(self) if f.name.startswith("eta"))


@dataclass
class PlasticityState:
    config: PlasticityConfig
    modulation: ModulationState
    neurons: dict[str, NeuronPlasticityState]
    activity: dict[str, np.ndarray]
    c_targets: dict[str, np.ndarray]
    step: int = 0
    l_task_ema: float | None = None


def init_plasticity(model: LanguageModel, config: PlasticityConfig | None = None) -> PlasticityState:
    """Fresh state; the synaptic-sum targets ``C_i`` are the row sums at this moment."""
    cfg = config or PlasticityConfig()
    if model.config.mode != "snn" or not model.neurons:
        raise ValueError("plasticity needs a converted (snn-mode) model")
    T = model.config.steps
    neurons = {}
    for site in quant_sites(model.config):
        width = model.neurons[site].shape[0]
        neurons[site] = NeuronPlasticityState(
            s_bar=np.full(width, np.nan), v_bar=np.full(width, np.nan),
            s_target=cfg.s_target_frac * T, v_target=cfg.v_target, v_rest=cfg.v_rest,
            eta_theta=cfg.eta_theta, eta_theta_task=cfg.eta_theta_task, eta_alpha=cfg.eta_alpha,
            eta_alpha_task=cfg.eta_alpha_task, eta_r=cfg.eta_r, eta_r_task=cfg.eta_r_task,
            ema=cfg.ema, homeostatic_sign_flip=cfg.homeostatic_sign_flip,
        )
    c_targets = {s.name: model.params[s.weight].astype(np.float64).sum(axis=1)
                 for s in linear_sites(model.config) if s.out_site is not None}
    return PlasticityState(cfg, ModulationState(cfg.beta_mod, cfg.window), neurons, {}, c_targets)


@dataclass
class SurrogateStats:
    """Per-element surrogate derivatives of the spike count and time statistics."""

    d_theta: np.ndarray
    d_alpha: np.ndarray
    d_r: np.ndarray
    t_exp: np.ndarray
    residual_v: np.ndarray


def surrogate_pass(x_scaled, T: int, theta_n, alpha_n, r, lambda_scale: float) -> SurrogateStats:
    """Re-run an EI_IF population and accumulate ``d count / d param`` through
    ``P(spike) = sigmoid((V - theta) / lambda)``.

    Thresholds are given in count units (``theta_n = T theta_base``,
    ``alpha_n = T alpha``) and so are the returned threshold derivatives.
    The per-step work runs in float32; sums are kept in float64.
    """
    x = np.asarray(x_scaled, dtype=np.float32)
    th = (np.asarray(theta_n, dtype=np.float64) / T).astype(np.float32)
    al = (np.asarray(alpha_n, dtype=np.float64) / T).astype(np.float32)
    keep = (1.0 - np.asarray(r, dtype=np.float64)).astype(np.float32)
    full_reset = not np.any(keep)
    half = np.float32(0.5 / lambda_scale)
    z = lambda: np.zeros(x.shape, np.float32)
    v_post, v_prev, d_theta, d_alpha, d_r, t_exp, resid = z(), z(), z(), z(), z(), z(), z()
    survive = np.ones(x.shape, np.float32)
    h_pos, h_neg, g_pos, g_neg, tmp = z(), z(), z(), z(), z()
    for t in range(1, T + 1):
        v = x if full_reset else v_post + x
        theta = th + al * np.float32(t)
        # sigmoid(u) = (1 + tanh(u / 2)) / 2, slope (1 - tanh^2) / 4
        np.subtract(v, theta, out=tmp)
        tmp *= half
        np.tanh(tmp, out=h_pos)
        np.add(v, theta, out=tmp)
        tmp *= -half
        np.tanh(tmp, out=h_neg)
        np.multiply(h_pos, h_pos, out=g_pos)
        np.subtract(1, g_pos, out=g_pos)
        np.multiply(h_neg, h_neg, out=g_neg)
        np.subtract(1, g_neg, out=g_neg)
        # count = s_pos - s_neg; both spike branches fall as theta rises
        np.subtract(g_neg, g_pos, out=tmp)
        d_theta += tmp
        tmp *= np.float32(t)
        d_alpha += tmp
        if t > 1:
            np.add(g_pos, g_neg, out=tmp)
            tmp *= v_prev
            d_r -= tmp
        # P(any spike) = p_pos + p_neg = 1 + (h_pos + h_neg) / 2, capped at 1
        np.add(h_pos, h_neg, out=tmp)
        np.minimum(tmp, 0, out=tmp)
        tmp *= 0.5
        tmp += 1
        tmp *= survive
        survive -= tmp
        tmp *= np.float32(t)
        t_exp += tmp
        if not full_reset:
            v_post = v * keep
            resid += v_post
        v_prev = v
    t_exp += np.float32(T + 1) * survive
    scale = 0.25 / lambda_scale
    f = lambda a: a.astype(np.float64)
    return SurrogateStats(f(d_theta) * (scale / T), f(d_alpha) * (scale / T), f(d_r) * scale, f(t_exp), f(resid) / T)


def _stdp_matrix(t_pre, t_post, p: StdpParams, chunk: int = 64):
    """Mean STDP value per synapse over tokens where both ends fired, NaN elsewhere."""
    pre = t_pre.reshape(-1, t_pre.shape[-1]).astype(np.float64)
    post = t_post.reshape(-1, t_post.shape[-1]).astype(np.float64)
    total = np.zeros((post.shape[1], pre.shape[1]))
    count = np.zeros_like(total)
    for i in range(0, len(pre), chunk):
        a, b = pre[i:i + chunk], post[i:i + chunk]
        both = (b[:, :, None] > 0) & (a[:, None, :] > 0)
        dt = b[:, :, None] - a[:, None, :]
        total += np.where(both, stdp_delta(dt, p), 0.0).sum(0)
        count += both.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.where(count > 0, count, 1.0), np.nan)


@dataclass
class StepMetrics:
    step: int
    l_task: float
    l_task_ema: float
    g: float
    baseline: float
    mean_abs_dw: float
    tagged: int
    mean_tag: float
    t_exp: float
    loss_total: float
    loss_terms: dict[str, float]

    def to_record(self) -> dict:
        return {
            "step": self.step, "l_task": self.l_task, "l_task_ema": self.l_task_ema, "G": self.g,
            "baseline": self.baseline, "mean_abs_dw": self.mean_abs_dw, "tagged": self.tagged,
            "mean_tag": self.mean_tag, "t_exp": self.t_exp, "loss_total": self.loss_total,
            **{f"loss_{k}": v for k, v in self.loss_terms.items()},
        }


def stdp_finetune_step(model: LanguageModel, batch, state: PlasticityState) -> tuple[LanguageModel, PlasticityState, StepMetrics]:
    """One plasticity step on ``batch = (inputs, targets)``; updates ``model`` in place.

    Order: spiking forward with traces, task loss, modulation factor from
    the baseline *before* this loss joins it, STDP matrices on first-spike
    times, tag-gated weight updates, neuron parameter updates, baseline
    update.  With every learning rate at zero nothing in the model changes.
    """
    cfg = state.config
    mcfg = model.config
    if mcfg.mode != "snn":
        raise ValueError("stdp_finetune_step needs an snn-mode model")
    inputs, targets = (np.asarray(b) for b in batch)
    run = snn_forward(model, inputs, record=True)
    missing = set(quant_sites(mcfg)) - set(run.traces)
    if missing:
        raise RuntimeError(f"forward did not record traces for {sorted(missing)}")
    T = mcfg.steps
    l_task = task_loss(run.logits, targets)
    g = global_modulation(l_task, state.modulation)
    base = state.modulation.baseline
    lam = cfg.lambda_scale if cfg.lambda_scale > 0 else 1.0 / T

    # spike activity per neuron: rate (tags) and count (homeostasis)
    for site, tr in run.traces.items():
        width = tr.counts.shape[-1]
        rate = np.abs(tr.counts).reshape(-1, width).mean(0) / T
        prev = state.activity.get(site)
        state.activity[site] = rate if prev is None else cfg.ema * prev + (1 - cfg.ema) * rate

    # surrogate statistics and task gradients through the quantized twin
    site_grads: dict = {}
    if cfg.task_gradient != "off":
        logits, cache = ann_forward(model, inputs, keep_cache=True)
        _, dlogits = _loss_and_grad(logits, targets)
        ann_backward(model, cache, dlogits, site_grads=site_grads)
    t_exps = []
    neuron_deltas = {}
    for site, tr in run.traces.items():
        prm = model.neurons[site].astype(np.float64)
        width = tr.counts.shape[-1]
        stats = surrogate_pass(tr.x_scaled, T, prm[:width, 0], prm[:width, 1], prm[:width, 2], lam)
        t_exps.append(float(stats.t_exp.mean()))
        n = state.neurons[site]
        s_now = np.zeros(n.s_bar.shape)
        v_now = np.zeros(n.s_bar.shape)
        s_now[:width] = np.abs(tr.counts).reshape(-1, width).mean(0)
        v_now[:width] = stats.residual_v.reshape(-1, width).mean(0)
        if np.all(np.isnan(n.s_bar)):
            n.s_bar, n.v_bar = s_now, v_now
        else:
            n.observe(s_now, v_now)
        grads = None
        if cfg.task_gradient != "off":
            unit = model.absmax(site) / T
            dl_dc = np.asarray(site_grads[site]) * unit
            sign = -1.0 if cfg.task_gradient == "descent" else 1.0
            grads = tuple(np.pad(sign * (dl_dc * d).reshape(-1, width).sum(0), (0, len(n.s_bar) - width))
                          for d in (stats.d_theta, stats.d_alpha, stats.d_r))
        neuron_deltas[site] = neuron_param_update(n, g, grads)

    # STDP on every linear map between two spiking populations
    tags, deltas, ws, cs = [], [], [], []
    dw_sum, dw_n, tagged = 0.0, 0, 0
    weight_updates = {}
    for ls in linear_sites(mcfg):
        if ls.out_site is None:
            continue
        delta = _stdp_matrix(run.traces[ls.in_site].first_spike, run.traces[ls.out_site].first_spike, cfg.stdp)
        tag = synaptic_tag(state.activity[ls.in_site][None, :], state.activity[ls.out_site][:, None], l_task)
        W = model.params[ls.weight].astype(np.float64)
        gate = (tag >= cfg.tag_threshold) & np.isfinite(delta)
        dw = np.where(gate, weight_update(W, np.where(np.isfinite(delta), delta, 0.0), g, cfg.eta_w), 0.0)
        weight_updates[ls.weight] = dw
        dw_sum += float(np.abs(dw).sum())
        dw_n += dw.size
        tagged += int(gate.sum())
        tags.append(tag)
        deltas.append(delta)
        ws.append(W)
        cs.append(state.c_targets[ls.name])

    if cfg.eta_w != 0:
        for name, dw in weight_updates.items():
            if np.any(dw):
                model.params[name] = (model.params[name].astype(np.float64) + dw).astype(DTYPE)
    for site, (d_theta, d_alpha, d_r) in neuron_deltas.items():
        if not (np.any(d_theta) or np.any(d_alpha) or np.any(d_r)):
            continue
        prm = model.neurons[site].astype(np.float64)
        prm[:, 0] += d_theta
        prm[:, 1] = np.maximum(prm[:, 1] + d_alpha, 0.0)
        prm[:, 2] = np.clip(prm[:, 2] + d_r, 0.0, 1.0)
        model.neurons[site] = prm.astype(DTYPE)

    state.modulation = update_baseline(state.modulation, l_task)
    k = cfg.loss_ema
    state.l_task_ema = l_task if state.l_task_ema is None else k * state.l_task_ema + (1 - k) * l_task
    s_bar = np.concatenate([n.s_bar for n in state.neurons.values()])
    v_bar = np.concatenate([n.v_bar for n in state.neurons.values()])
    t_exp = float(np.mean(t_exps))
    snap = LossSnapshot(ws, deltas, tags, cs, s_bar, v_bar, cfg.s_target_frac * T, cfg.v_target, cfg.v_rest,
                        t_exp, cfg.t_target_frac * T, l_task)
    total, terms = composite_loss(cfg.loss_weights, snap)
    metrics = StepMetrics(
        state.step, l_task, state.l_task_ema, g, l_task if base is None else base,
        dw_sum / max(dw_n, 1), tagged, float(np.mean([t.mean() for t in tags])), t_exp, total, terms,
    )
    state.step += 1
    return model, state, metrics


def finetune(model: LanguageModel, inputs, targets, steps: int, rng, *, batch_size: int = 4,
             config: PlasticityConfig | None = None, on_step=None) -> tuple[PlasticityState, list[StepMetrics]]:
    """Run ``steps`` plasticity steps over shuffled windows (order from ``rng``)."""
    state = init_plasticity(model, config)
    history = []
    n = len(inputs)
    order = np.array([], dtype=np.int64)
    epoch = 0
    pos = 0
    for _ in range(steps):
        if pos + batch_size > len(order):
            order = rng.child(f"stdp-epoch{epoch}").permutation(n)
            epoch += 1
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        _, state, m = stdp_finetune_step(model, (inputs[idx], targets[idx]), state)
        history.append(m)
        if on_step is not None:
            on_step(m)
    return state, history
