import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnlm.neuron import (
    EiIfParams,
    EiIfState,
    RateEncoder,
    SpikeTrain,
    decode_rate,
    ei_if_step,
    encode_rate,
    rate_count,
    rate_params,
    run_ei_if,
)

unit = st.floats(-1.0, 1.0, allow_nan=False)
steps = st.integers(1, 64)


def simulate_scalar(x, T, theta_base, alpha, atten):
    """Step-by-step oracle built from ei_if_step."""
    p = EiIfParams(theta_base, alpha, atten)
    s = EiIfState()
    out = []
    for _ in range(T):
        spike, s = ei_if_step(p, s, x)
        out.append(spike)
    return out


def test_step_positive_crossing_full_reset():
    spike, s = ei_if_step(EiIfParams(1.0, 0.0, 1.0), EiIfState(0.0, 0), 1.5)
    assert spike == 1 and s.v == 0.0 and s.t == 1


def test_step_negative_crossing():
    spike, _ = ei_if_step(EiIfParams(1.0, 0.0, 1.0), EiIfState(0.0, 0), -1.5)
    assert spike == -1


def test_step_growing_threshold_blocks():
    # theta(4) = 1 + 4 * 0.5 = 3 > 1.5
    spike, s = ei_if_step(EiIfParams(1.0, 0.5, 1.0), EiIfState(0.0, 3), 1.5)
    assert spike == 0 and s.t == 4


def test_step_equality_fires():
    spike, _ = ei_if_step(EiIfParams(1.0, 0.0, 1.0), EiIfState(), 1.0)
    assert spike == 1
    spike, _ = ei_if_step(EiIfParams(1.0, 0.0, 1.0), EiIfState(), -1.0)
    assert spike == -1


def test_step_partial_attenuation_keeps_potential():
    _, s = ei_if_step(EiIfParams(10.0, 0.0, 0.25), EiIfState(), 2.0)
    assert s.v == pytest.approx(1.5)


def test_step_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ei_if_step(EiIfParams(1.0, 0.0), EiIfState(), float("nan"))


def test_params_validate_attenuation():
    with pytest.raises(ValueError):
        EiIfParams(1.0, 0.0, 1.5)
    with pytest.raises(ValueError):
        EiIfState(0.0, -1)


@pytest.mark.parametrize("x,T,count", [(0.0, 8, 0), (1.0, 8, 8), (0.5, 8, 4), (-0.5, 8, -4), (-1.0, 3, -3)])
def test_encode_examples(x, T, count):
    assert int(encode_rate(np.array([x]), T).accumulated[0]) == count


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode_rate(np.array([1.01]), 8)
    with pytest.raises(FloatingPointError):
        encode_rate(np.array([np.inf]), 8)


def test_encode_saturates_when_allowed():
    assert int(encode_rate(np.array([3.0]), 8, saturate=True).accumulated[0]) == 8


@settings(max_examples=200, deadline=None)
@given(unit, steps)
def test_rate_code_closed_form_matches_step_simulation(x, T):
    p = rate_params(T)
    spikes = simulate_scalar(x, T, p.theta_base, p.alpha, p.attenuation_rate)
    expected = int(math.copysign(1, x)) * min(T, math.floor(T * abs(x) + 0.5)) if x != 0 else 0
    assert sum(spikes) == expected
    assert int(encode_rate(np.array([x]), T).accumulated[0]) == expected
    assert int(rate_count(np.array([x]), T)[0]) == expected


@settings(max_examples=100, deadline=None)
@given(unit, unit, steps)
def test_rate_code_monotone_in_magnitude(a, b, T):
    lo, hi = sorted([abs(a), abs(b)])
    c = encode_rate(np.array([lo, hi]), T).accumulated
    assert abs(c[0]) <= abs(c[1])


@settings(max_examples=100, deadline=None)
@given(st.lists(unit, min_size=1, max_size=20), steps)
def test_spikes_ternary_and_bounded(xs, T):
    tr = encode_rate(np.array(xs), T)
    assert set(np.unique(tr.spikes)).issubset({-1, 0, 1})
    assert np.all(np.abs(tr.accumulated) <= T)
    assert np.array_equal(tr.accumulated, tr.spikes.sum(0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3, allow_nan=False), st.floats(-1, 1), st.floats(0, 1), steps)
def test_full_reset_leaves_zero_potential(x, th, al, T):
    s = EiIfState()
    p = EiIfParams(th, al, 1.0)
    for _ in range(T):
        _, s = ei_if_step(p, s, x)
        assert s.v == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=6), st.floats(-0.5, 1), st.floats(0, 0.5),
       st.floats(0, 1), st.integers(1, 20))
def test_population_matches_scalar_oracle(xs, th, al, atten, T):
    tr = run_ei_if(np.array(xs), T, th, al, atten)
    for i, x in enumerate(xs):
        assert tr.train.spikes[:, i].tolist() == simulate_scalar(x, T, th, al, atten)


def test_decode_examples():
    assert decode_rate(SpikeTrain(np.ones((8, 1))), 8)[0] == 1.0
    tr = encode_rate(np.array([0.5, 0.0]), 8)
    assert np.array_equal(decode_rate(tr, 8), np.array([0.5, 0.0], np.float32))
    with pytest.raises(ValueError):
        decode_rate(tr, 4)


def test_round_trip_on_grid():
    T = 16
    x = np.linspace(-1, 1, 257)
    got = decode_rate(encode_rate(x, T), T)
    want = (np.sign(x) * np.floor(T * np.abs(x) + 0.5) / T).astype(np.float32)
    assert np.array_equal(got, want)


def test_first_spike_times():
    tr = SpikeTrain(np.array([[0, 0, 0], [1, 0, 0], [0, -1, 0]]))
    assert tr.first_spike_times().tolist() == [2, 3, 0]


def test_rate_encoder_estimator():
    X = np.array([[0.5, -2.0], [1.0, 0.0]])
    enc = RateEncoder(T=8).fit(X)
    assert enc.scaling_factor_ == 2.0
    assert np.array_equal(enc.transform(X), np.array([[0.25, -1.0], [0.5, 0.0]], np.float32))
    with pytest.raises(AttributeError):
        RateEncoder().transform(X)


@pytest.mark.parametrize("T", [3, 7, 31, 127])
def test_encoder_exact_at_half_level_ties(T):
    x = (np.arange(-T, T) + 0.5) / T
    assert np.array_equal(encode_rate(x, T).accumulated, rate_count(x, T))
