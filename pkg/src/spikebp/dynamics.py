"""Single-neuron LIF dynamics, evaluated exactly between events.

Times are integer microseconds. Potentials and traces are float64 and are
only ever advanced with the closed-form factor ``exp((t_prev - t_now) / tau)``,
so updating in several hops gives the same answer as one hop.

The scalar helpers at the top are numba-compiled so the layer kernel in
:mod:`spikebp.network` can share them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit

NEVER = -1  # sentinel for "no output spike yet" inside compiled code

# Streams of events are kept as structured arrays rather than lists of objects.
EVENT_DTYPE = np.dtype([("time", np.int64), ("source", np.int64), ("channel", np.int8)])


class EventOrderError(ValueError):
    """An update was requested for a time earlier than the state's clock."""


@njit(cache=True)
def decay_factor(t_prev, t_now, tau):
    return math.exp((t_prev - t_now) / tau)


@njit(cache=True)
def refractory_gain(t_p, t_out, t_ref, w_d0):
    # t_out < 0 means the neuron has never fired
    if t_out < 0:
        return 1.0
    elapsed = t_p - t_out
    if elapsed >= t_ref:
        return 1.0
    r = elapsed / t_ref
    g = w_d0 + r * r
    return g if g < 1.0 else 1.0


@dataclass(frozen=True, order=True)
class SpikeEvent:
    time: int
    source: int
    channel: int = 0


def make_stream(times, sources, channels=None) -> np.ndarray:
    """Pack parallel arrays into an event stream (no sorting is done)."""
    times = np.asarray(times, dtype=np.int64)
    out = np.empty(times.shape[0], dtype=EVENT_DTYPE)
    out["time"] = times
    out["source"] = sources
    out["channel"] = 0 if channels is None else channels
    return out


@dataclass(frozen=True)
class RefractoryConfig:
    t_ref: int = 1000
    w_d0: float = 0.0

    def __post_init__(self):
        if self.t_ref <= 0:
            raise ValueError(f"t_ref must be positive, got {self.t_ref}")
        if not 0.0 <= self.w_d0 < 1.0:
            raise ValueError(f"w_d0 must lie in [0, 1), got {self.w_d0}")


@dataclass(frozen=True)
class NeuronState:
    v_mp: float = 0.0
    t_last: int = 0
    t_out: Optional[int] = None
    a_trace: float = 0.0
    a_trace_t: int = 0


@dataclass(frozen=True)
class Trace:
    value: float = 0.0
    t_last: int = 0


def _check_order(t_prev, t_now):
    if t_now < t_prev:
        raise EventOrderError(f"event at t={t_now} precedes state time t={t_prev}")


def decay(value: float, t_prev: int, t_now: int, tau_mp: float) -> float:
    """Leak ``value`` from ``t_prev`` to ``t_now``."""
    _check_order(t_prev, t_now)
    if tau_mp <= 0:
        raise ValueError("tau_mp must be positive")
    return value * decay_factor(float(t_prev), float(t_now), float(tau_mp))


def dynamic_weight(t_p: int, t_out: Optional[int], cfg: RefractoryConfig) -> float:
    """Input gain after an output spike; recovers quadratically to 1 over ``t_ref``."""
    if t_out is None:
        return 1.0
    if t_p < t_out:
        raise EventOrderError(f"t_p={t_p} precedes last output spike t_out={t_out}")
    return refractory_gain(float(t_p), float(t_out), float(cfg.t_ref), float(cfg.w_d0))


def _clamp(v, v_th):
    return min(max(v, -v_th), v_th)


def on_input_spike(
    state: NeuronState,
    w: float,
    t: int,
    *,
    v_th: float,
    tau_mp: float,
    refractory: RefractoryConfig,
) -> tuple[NeuronState, bool]:
    """Integrate one weighted input spike arriving at ``t``.

    Only the lower bound ``-v_th`` is enforced here; a potential at or above
    threshold is left in place so :func:`fire_and_reset` keeps the residual.
    """
    _check_order(state.t_last, t)
    v = decay(state.v_mp, state.t_last, t, tau_mp)
    v += w * dynamic_weight(t, state.t_out, refractory)
    v = max(v, -v_th)
    return replace(state, v_mp=v, t_last=t), v >= v_th


def fire_and_reset(
    state: NeuronState,
    t: int,
    *,
    v_th: float,
    tau_mp: float,
    gamma: float = 1.0,
    index: int = 0,
) -> tuple[NeuronState, SpikeEvent]:
    if state.v_mp < v_th:
        raise ValueError(f"fire_and_reset called below threshold ({state.v_mp} < {v_th})")
    _check_order(state.a_trace_t, t)
    v = _clamp(state.v_mp - gamma * v_th, v_th)
    a = decay(state.a_trace, state.a_trace_t, t, tau_mp) + 1.0
    new = replace(state, v_mp=v, t_last=max(state.t_last, t), t_out=t, a_trace=a, a_trace_t=t)
    return new, SpikeEvent(time=t, source=index)


def apply_lateral_inhibition(
    state: NeuronState, kappa: float, t: int, *, v_th: float, tau_mp: float
) -> NeuronState:
    """Inhibit by ``kappa * v_th`` of the *receiving* neuron."""
    if not -1.0 <= kappa < 0.0:
        raise ValueError(f"kappa must lie in [-1, 0), got {kappa}")
    v = decay(state.v_mp, state.t_last, t, tau_mp)
    return replace(state, v_mp=_clamp(v + kappa * v_th, v_th), t_last=t)


def trace_decay_add(trace: Trace, t: int, tau_mp: float, add_spike: bool) -> Trace:
    value = decay(trace.value, trace.t_last, t, tau_mp)
    return Trace(value=value + (1.0 if add_spike else 0.0), t_last=t)
