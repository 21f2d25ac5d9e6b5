import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikebp.dynamics import (
    EventOrderError,
    NeuronState,
    RefractoryConfig,
    Trace,
    apply_lateral_inhibition,
    decay,
    dynamic_weight,
    fire_and_reset,
    on_input_spike,
    trace_decay_add,
)

TAU = 20_000.0
NO_REF = RefractoryConfig(t_ref=1000, w_d0=0.0)


# decay

def test_decay_zero_elapsed():
    assert decay(1.0, 0, 0, TAU) == 1.0


def test_decay_one_time_constant():
    assert decay(1.0, 0, 20_000, TAU) == pytest.approx(0.36787944117144233, rel=1e-15)


def test_decay_of_zero_is_zero():
    assert decay(0.0, 0, 5000, TAU) == 0.0


def test_decay_rejects_time_reversal():
    with pytest.raises(EventOrderError):
        decay(1.0, 10, 5, TAU)


@given(
    v=st.floats(-10, 10, allow_nan=False),
    t0=st.integers(0, 10**6),
    d1=st.integers(0, 10**6),
    d2=st.integers(0, 10**6),
    tau=st.floats(100.0, 1e6),
)
def test_decay_composes(v, t0, d1, d2, tau):
    two_hops = decay(decay(v, t0, t0 + d1, tau), t0 + d1, t0 + d1 + d2, tau)
    one_hop = decay(v, t0, t0 + d1 + d2, tau)
    assert two_hops == pytest.approx(one_hop, rel=1e-12, abs=1e-300)


# refractory dynamic weight

def test_dynamic_weight_without_prior_spike():
    assert dynamic_weight(5000, None, NO_REF) == 1.0


def test_dynamic_weight_half_period():
    assert dynamic_weight(1500, 1000, NO_REF) == pytest.approx(0.25)


def test_dynamic_weight_after_period():
    assert dynamic_weight(3000, 1000, NO_REF) == 1.0


def test_dynamic_weight_offset():
    cfg = RefractoryConfig(t_ref=1000, w_d0=0.1)
    assert dynamic_weight(1000, 1000, cfg) == pytest.approx(0.1)
    assert dynamic_weight(1999, 1000, cfg) == 1.0


def test_refractory_config_validation():
    with pytest.raises(ValueError):
        RefractoryConfig(t_ref=0)
    with pytest.raises(ValueError):
        RefractoryConfig(w_d0=1.0)


@given(
    e1=st.integers(0, 3000),
    e2=st.integers(0, 3000),
    w_d0=st.floats(0.0, 0.99),
)
def test_dynamic_weight_monotone_and_bounded(e1, e2, w_d0):
    cfg = RefractoryConfig(t_ref=1000, w_d0=w_d0)
    lo, hi = sorted((e1, e2))
    g_lo = dynamic_weight(10_000 + lo, 10_000, cfg)
    g_hi = dynamic_weight(10_000 + hi, 10_000, cfg)
    assert w_d0 - 1e-15 <= g_lo <= g_hi <= 1.0
    if hi >= 1000:
        assert g_hi == 1.0


def test_dynamic_weight_continuous_at_period_end():
    cfg = RefractoryConfig(t_ref=1000, w_d0=0.0)
    assert dynamic_weight(1999, 1000, cfg) == pytest.approx(1.0, abs=3e-3)


# input integration

def test_input_spike_adds_weight():
    s, fired = on_input_spike(NeuronState(), 0.5, 0, v_th=0.6, tau_mp=TAU, refractory=NO_REF)
    assert s.v_mp == pytest.approx(0.5)
    assert not fired


def test_input_spike_crossing_threshold():
    s, fired = on_input_spike(NeuronState(v_mp=0.3), 0.4, 0, v_th=0.6, tau_mp=TAU, refractory=NO_REF)
    assert fired


def test_input_spike_lower_clamp():
    s, _ = on_input_spike(NeuronState(v_mp=-0.5), -0.4, 0, v_th=0.6, tau_mp=TAU, refractory=NO_REF)
    assert s.v_mp == -0.6


def test_input_spike_during_refractory_is_scaled():
    st0 = NeuronState(t_last=1000, t_out=1000)
    s, _ = on_input_spike(st0, 0.4, 1500, v_th=1.0, tau_mp=1e12, refractory=NO_REF)
    assert s.v_mp == pytest.approx(0.1)


def test_input_spike_rejects_out_of_order():
    with pytest.raises(EventOrderError):
        on_input_spike(NeuronState(t_last=10), 0.1, 5, v_th=1.0, tau_mp=TAU, refractory=NO_REF)


# firing

def test_reset_at_exact_threshold():
    s, ev = fire_and_reset(NeuronState(v_mp=0.6), 0, v_th=0.6, tau_mp=TAU)
    assert s.v_mp == pytest.approx(0.0)
    assert ev.time == 0


def test_reset_keeps_residual():
    s, _ = fire_and_reset(NeuronState(v_mp=0.7), 0, v_th=0.6, tau_mp=TAU)
    assert s.v_mp == pytest.approx(0.1)


def test_reset_increments_trace():
    s, ev = fire_and_reset(NeuronState(v_mp=1.0), 250, v_th=0.6, tau_mp=TAU, index=3)
    assert s.a_trace == 1.0
    assert s.t_out == 250
    assert (ev.time, ev.source) == (250, 3)


def test_reset_below_threshold_rejected():
    with pytest.raises(ValueError):
        fire_and_reset(NeuronState(v_mp=0.5), 0, v_th=0.6, tau_mp=TAU)


def test_reset_clamps_large_residual():
    s, _ = fire_and_reset(NeuronState(v_mp=2.0), 0, v_th=0.6, tau_mp=TAU)
    assert s.v_mp == 0.6


# lateral inhibition

@pytest.mark.parametrize(
    "v, kappa, v_th, expected",
    [(0.3, -0.4, 0.5, 0.1), (-0.4, -1.0, 0.5, -0.5), (0.0, -0.4, 0.5, -0.2)],
)
def test_lateral_inhibition_examples(v, kappa, v_th, expected):
    s = apply_lateral_inhibition(NeuronState(v_mp=v), kappa, 0, v_th=v_th, tau_mp=TAU)
    assert s.v_mp == pytest.approx(expected)


@pytest.mark.parametrize("kappa", [0.0, 0.1, -1.5])
def test_lateral_inhibition_rejects_bad_kappa(kappa):
    with pytest.raises(ValueError):
        apply_lateral_inhibition(NeuronState(), kappa, 0, v_th=0.5, tau_mp=TAU)


# traces

def test_trace_two_spikes_one_tau_apart():
    tr = trace_decay_add(Trace(), 0, TAU, True)
    tr = trace_decay_add(tr, 20_000, TAU, True)
    assert tr.value == pytest.approx(1.0 + math.exp(-1.0), rel=1e-14)


def test_trace_without_spikes_stays_zero():
    assert trace_decay_add(Trace(), 1000, TAU, False).value == 0.0


def test_trace_spike_at_read_time():
    assert trace_decay_add(Trace(), 500, TAU, True).value == 1.0


@given(st.lists(st.integers(0, 200_000), min_size=0, max_size=40), st.integers(0, 50_000))
def test_lazy_trace_matches_direct_sum(times, extra):
    times = sorted(times)
    tr = Trace()
    for t in times:
        tr = trace_decay_add(tr, t, TAU, True)
    t_read = (times[-1] if times else 0) + extra
    tr = trace_decay_add(tr, t_read, TAU, False)
    direct = sum(math.exp((t - t_read) / TAU) for t in times)
    assert tr.value == pytest.approx(direct, rel=1e-9, abs=1e-300)


# fuzzing the clamp invariant over random operation sequences

op_strategy = st.lists(
    st.tuples(st.sampled_from(["in", "inh"]), st.integers(0, 3000), st.floats(-2.0, 2.0)),
    max_size=60,
)


@settings(max_examples=200)
@given(ops=op_strategy, v_th=st.floats(0.05, 2.0), w_d0=st.floats(0.0, 0.9))
def test_potential_stays_clamped(ops, v_th, w_d0):
    cfg = RefractoryConfig(t_ref=1000, w_d0=w_d0)
    s = NeuronState()
    t = 0
    for kind, dt, val in ops:
        t += dt
        if kind == "in":
            s, fired = on_input_spike(s, val, t, v_th=v_th, tau_mp=TAU, refractory=cfg)
            if fired:
                s, _ = fire_and_reset(s, t, v_th=v_th, tau_mp=TAU)
        else:
            s = apply_lateral_inhibition(s, -min(1.0, abs(val) / 2 + 0.01), t, v_th=v_th, tau_mp=TAU)
        assert -v_th <= s.v_mp <= v_th
        assert s.a_trace >= 0.0
