import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from snnlm.conversion import convert
from snnlm.model import windows
from snnlm.plasticity import (
    TERMS,
    CompositeLossWeights,
    LossSnapshot,
    ModulationState,
    NeuronPlasticityState,
    PlasticityConfig,
    StdpParams,
    composite_loss,
    expected_time_steps,
    finetune,
    global_modulation,
    init_plasticity,
    neuron_param_update,
    spike_probability,
    stdp_delta,
    stdp_finetune_step,
    surrogate_pass,
    synaptic_tag,
    update_baseline,
    weight_update,
)
from snnlm.tensor import Rng

from helpers import calibrated_tiny

prob = st.floats(0, 1)


def enumerate_first_spike(p):
    """Sum over every spike/no-spike outcome sequence, weighting its first-spike step."""
    n = len(p)
    total = 0.0
    for outcome in itertools.product([0, 1], repeat=n):
        w = 1.0
        for pi, o in zip(p, outcome):
            w *= pi if o else 1 - pi
        first = outcome.index(1) + 1 if 1 in outcome else n + 1
        total += w * first
    return total


def resum(weights: CompositeLossWeights, s: LossSnapshot) -> float:
    """Term-by-term oracle with explicit loops."""
    L = 0.0
    for W, D, G, C in zip(s.w, s.delta, s.tag, s.c_targets):
        for i in range(W.shape[0]):
            for j in range(W.shape[1]):
                if not math.isnan(D[i, j]):
                    L += weights.lambda_w * G[i, j] * (W[i, j] - D[i, j]) ** 2
                L += weights.lambda_reg * W[i, j] ** 2
            L += weights.lambda_c * (sum(W[i]) - C[i]) ** 2
    for sb, vb in zip(s.s_bar, s.v_bar):
        L += weights.lambda_theta * (s.s_target - sb) ** 2
        L += weights.lambda_alpha * (vb - s.v_target) ** 2
        L += weights.lambda_r * (vb - s.v_rest) ** 2
    L += weights.lambda_t * (s.t_exp - s.t_target) ** 2
    return L + weights.lambda_task * s.l_task


def random_snapshot(rng, met=False):
    w = [rng.normal(size=(3, 4)), rng.normal(size=(2, 3))]
    delta = [d.copy() if met else rng.normal(size=d.shape) for d in w]
    if not met:
        delta[0][0, 1] = np.nan
    tag = [rng.uniform(size=d.shape) for d in w]
    c = [d.sum(1) if met else rng.normal(size=d.shape[0]) for d in w]
    sb = np.full(5, 1.4) if met else rng.uniform(0, 3, 5)
    vb = np.zeros(5) if met else rng.normal(size=5)
    t_exp = 3.5 if met else rng.uniform(1, 8)
    return LossSnapshot(w, delta, tag, c, sb, vb, 1.4, 0.0, 0.0, t_exp, 3.5, 2.25)


# --- STDP kernel -----------------------------------------------------------


def test_stdp_branches():
    p = StdpParams(1.0, 0.7, 4.0, 3.0)
    assert stdp_delta(0.0, p) == -0.7
    assert abs(stdp_delta(4.0, StdpParams()) - math.exp(-1)) < 1e-9
    assert abs(stdp_delta(200.0, StdpParams())) < 1e-6
    assert stdp_delta(-3.0, p) == pytest.approx(-0.7 * math.exp(-1), abs=1e-12)
    assert np.allclose(stdp_delta(np.array([1.0, -1.0]), p), [math.exp(-0.25), -0.7 * math.exp(-1 / 3)])


def test_stdp_params_positive():
    with pytest.raises(ValueError):
        StdpParams(tau_plus=0)


# --- modulation ------------------------------------------------------------


def test_modulation_values():
    m = ModulationState(1.0, 3, deque([2.0]))
    assert global_modulation(2.0, m) == 0.5
    assert global_modulation(0.0, m) == pytest.approx(0.880797, abs=1e-6)
    assert global_modulation(1.9, m) > 0.5
    assert global_modulation(5.0, ModulationState()) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 5))
def test_modulation_in_open_interval(l, b, beta):
    g = global_modulation(l, ModulationState(beta, 4, deque([b])))
    assert 0 <= g <= 1
    if abs(beta * (b - l)) < 30:
        assert 0 < g < 1


def test_baseline_window():
    m = ModulationState(window=3)
    for v in (2, 4):
        m = update_baseline(m, v)
    assert m.baseline == 3
    m = update_baseline(m, 6)
    assert m.baseline == 4
    m = update_baseline(m, 10)
    assert list(m.recent_losses) == [4, 6, 10]
    c = ModulationState(window=5)
    for _ in range(7):
        c = update_baseline(c, 1.25)
    assert c.baseline == 1.25
    with pytest.raises(ValueError):
        ModulationState(window=0)


# --- weight and neuron updates ---------------------------------------------


def test_weight_update_examples():
    assert weight_update(0.3, 0.3, 0.9, 0.5) == 0
    assert weight_update(0.0, 1.0, 0.5, 0.1) == pytest.approx(0.05)
    assert weight_update(1.0, -1.0, 0.0, 0.1) == 0


def test_neuron_update_fixed_point():
    n = NeuronPlasticityState(np.array([1.4]), np.array([0.0]), s_target=1.4)
    assert all(not np.any(d) for d in neuron_param_update(n, 0.7))


def test_neuron_update_sign_and_value():
    n = NeuronPlasticityState(np.array([1.0]), np.array([0.0]), s_target=3.0, eta_theta=0.01)
    d_theta, _, _ = neuron_param_update(n, 0.5)
    assert d_theta[0] == pytest.approx(0.01)
    flipped = NeuronPlasticityState(np.array([1.0]), np.array([0.0]), s_target=3.0, homeostatic_sign_flip=True)
    assert neuron_param_update(flipped, 0.5)[0][0] < 0


def test_neuron_update_with_gradients():
    n = NeuronPlasticityState(np.zeros(2), np.array([0.5, -0.5]), eta_theta_task=0.1, eta_alpha_task=0.2,
                              eta_r_task=0.3, eta_alpha=1.0, eta_r=1.0)
    dt, da, dr = neuron_param_update(n, 1.0, (np.ones(2), np.ones(2), np.ones(2)))
    assert np.allclose(dt, 0.1) and np.allclose(da, [0.7, -0.3]) and np.allclose(dr, [0.8, -0.2])


def test_observe_is_ema():
    n = NeuronPlasticityState(np.array([1.0]), np.array([2.0]), ema=0.9)
    n.observe([2.0], [0.0])
    assert n.s_bar[0] == pytest.approx(1.1) and n.v_bar[0] == pytest.approx(1.8)


# --- time-step objective, probabilities, tags ------------------------------


def test_expected_time_examples():
    assert expected_time_steps([1.0, 0.3, 0.2]) == 1.0
    assert expected_time_steps([0.5] * 200) == pytest.approx(2.0, abs=1e-9)
    assert expected_time_steps([0.0] * 7) == 8.0
    with pytest.raises(ValueError):
        expected_time_steps([1.2])


@settings(max_examples=100, deadline=None)
@given(st.lists(prob, min_size=1, max_size=12))
def test_expected_time_matches_enumeration(p):
    assert abs(expected_time_steps(p) - enumerate_first_spike(p)) <= 1e-9


def test_spike_probability():
    assert spike_probability(0.3, 0.3, 0.1) == 0.5
    assert spike_probability(100.0, 0.0, 1.0) == pytest.approx(1.0)
    assert spike_probability(1.5, 1.0, 0.5) == pytest.approx(0.731059, abs=1e-6)
    with pytest.raises(ValueError):
        spike_probability(0, 0, 0)


def test_synaptic_tag():
    assert synaptic_tag(0.3, 0.2, 0.5) == 0.5
    assert synaptic_tag(1.0, 1.0, 0.0) > 0.85
    assert synaptic_tag(1.0, 1.0, -20.0) == pytest.approx(1.0)


# --- composite loss --------------------------------------------------------


def test_composite_task_only():
    w = CompositeLossWeights(0, 0, 0, 0, 0, 0, 1, 0)
    total, parts = composite_loss(w, random_snapshot(np.random.default_rng(0)))
    assert total == 2.25 and parts["task"] == 2.25


def test_composite_targets_met():
    w = CompositeLossWeights(lambda_reg=0.0, lambda_task=0.5)
    total, _ = composite_loss(w, random_snapshot(np.random.default_rng(0), met=True))
    assert total == 0.5 * 2.25


@pytest.mark.parametrize("seed", range(10))
def test_composite_matches_resummation(seed):
    rng = np.random.default_rng(seed)
    w = CompositeLossWeights(*rng.uniform(0, 2, 8))
    snap = random_snapshot(rng)
    total, parts = composite_loss(w, snap)
    assert abs(total - resum(w, snap)) <= 1e-9
    assert abs(sum(parts.values()) - total) <= 1e-9
    assert set(parts) == set(TERMS) and all(v >= 0 for v in parts.values())


def test_composite_weights_validation():
    with pytest.raises(ValueError):
        CompositeLossWeights(lambda_w=-1)
    with pytest.raises(ValueError):
        CompositeLossWeights(0, 0, 0, 0, 0, 0, 0, 0)


# --- surrogate pass --------------------------------------------------------


def surrogate_reference(x, T, thn, aln, r, lam):
    """Straightforward float64 version with explicit sigmoids."""
    th, al, keep = thn / T, aln / T, 1 - r
    vp = np.zeros_like(x)
    vprev = np.zeros_like(x)
    d_th, d_al, d_r, t_exp, resid = (np.zeros_like(x) for _ in range(5))
    surv = np.ones_like(x)
    for t in range(1, T + 1):
        v = vp + x
        theta = th + al * t
        pp, pn = expit((v - theta) / lam), expit((-v - theta) / lam)
        gp, gn = pp * (1 - pp) / lam, pn * (1 - pn) / lam
        d_th += (gn - gp) / T
        d_al += (gn - gp) * t / T
        d_r -= (gp + gn) * vprev
        p = np.minimum(pp + pn, 1)
        t_exp += t * p * surv
        surv *= 1 - p
        vp, vprev = v * keep, v
        resid += vp
    return d_th, d_al, d_r, t_exp + (T + 1) * surv, resid / T


@pytest.mark.parametrize("partial", [False, True])
def test_surrogate_matches_reference(partial):
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (40, 6))
    T = 15
    r = rng.uniform(0, 1, 6) if partial else np.ones(6)
    th, al = rng.uniform(-1, 1, 6), rng.uniform(0.5, 2, 6)
    got = surrogate_pass(x, T, th, al, r, 1 / T)
    for want, have in zip(surrogate_reference(x, T, th, al, r, 1 / T),
                          (got.d_theta, got.d_alpha, got.d_r, got.t_exp, got.residual_v)):
        assert np.allclose(have, want, rtol=1e-3, atol=1e-3 * max(1.0, np.abs(want).max()))


def test_surrogate_full_reset_has_no_residual():
    s = surrogate_pass(np.full((3, 2), 0.4), 7, np.full(2, -0.5), np.ones(2), np.ones(2), 1 / 7)
    assert not s.residual_v.any() and np.all(s.t_exp >= 1)


# --- fine-tuning loop ------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_snn(banks):
    return convert(calibrated_tiny(), banks)


def tiny_batch(n=2, seed=0):
    toks = Rng(seed).integers(256, n * 16 + 1)
    X, Y = windows(toks, 16)
    return X[:n], Y[:n]


def test_zero_rate_step_is_bit_identical(tiny_snn):
    m = tiny_snn.copy()
    cfg = PlasticityConfig(**{k: 0.0 for k in ("eta_w", "eta_theta", "eta_theta_task", "eta_alpha",
                                                  "eta_alpha_task", "eta_r", "eta_r_task")})
    assert cfg.zero_rates
    state = init_plasticity(m, cfg)
    for seed in range(2):
        stdp_finetune_step(m, tiny_batch(seed=seed), state)
    for k in tiny_snn.params:
        assert m.params[k].tobytes() == tiny_snn.params[k].tobytes()
    for k in tiny_snn.neurons:
        assert m.neurons[k].tobytes() == tiny_snn.neurons[k].tobytes()


def test_step_metrics_and_state(tiny_snn):
    m = tiny_snn.copy()
    state = init_plasticity(m)
    _, state, met = stdp_finetune_step(m, tiny_batch(), state)
    rec = met.to_record()
    assert rec["G"] == 0.5 and rec["step"] == 0 and state.step == 1
    assert rec["loss_total"] == pytest.approx(sum(v for k, v in rec.items() if k.startswith("loss_") and k != "loss_total"))
    assert state.modulation.baseline == met.l_task
    assert all(np.all(np.isfinite(n.s_bar)) for n in state.neurons.values())


def test_low_loss_raises_next_g(tiny_snn):
    m = tiny_snn.copy()
    state = init_plasticity(m)
    _, state, first = stdp_finetune_step(m, tiny_batch(), state)
    assert global_modulation(first.l_task - 1.0, state.modulation) > 0.5


def test_step_rejects_ann_model():
    with pytest.raises(ValueError):
        init_plasticity(calibrated_tiny())


def test_finetune_is_deterministic(tiny_snn):
    X, Y = tiny_batch(6, 3)
    runs = []
    for _ in range(2):
        m = tiny_snn.copy()
        _, hist = finetune(m, X, Y, 3, Rng(1), batch_size=2)
        runs.append(([h.to_record() for h in hist], m))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1].neurons[k].tobytes() == runs[1][1].neurons[k].tobytes() for k in tiny_snn.neurons)


def test_config_validation():
    with pytest.raises(ValueError):
        PlasticityConfig(task_gradient="sideways")
    with pytest.raises(ValueError):
        PlasticityConfig(ema=1.0)
