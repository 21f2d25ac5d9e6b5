"""Slow, independent references for the test suite.

``clock_driven_forward`` advances every potential and trace one microsecond
at a time instead of jumping between events; ``numeric_gradient`` is plain
central differences. Neither shares code with the event kernel or the
analytic derivatives they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class DenseSimConfig:
    duration: int
    dt: int = 1


@dataclass
class DenseResult:
    v_mp: list  # final potentials per layer
    a: list  # final output traces per layer
    x: np.ndarray  # final input traces of the first layer
    spike_counts: list
    spikes: np.ndarray  # (n, 3): time, layer, neuron
    trajectory: Optional[np.ndarray] = None  # (steps + 1, total neurons) potentials, if requested


def _gain(t, t_out, t_ref, w_d0):
    if t_out is None or t - t_out >= t_ref:
        return 1.0
    return min(1.0, w_d0 + ((t - t_out) / t_ref) ** 2)


def clock_driven_forward(params: Sequence, events, cfg: DenseSimConfig, record_trajectory: bool = False) -> DenseResult:
    """Step-by-step simulation with the same event ordering rules as the event kernel."""
    if cfg.dt != 1:
        raise ValueError("only dt = 1 µs is supported")
    tau = params[0].tau_mp
    sizes = [p.n_neurons for p in params]
    m_in = params[0].n_synapses
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n_tot = int(offs[-1])
    # one flat buffer: potentials, output traces, input traces
    state = np.zeros(2 * n_tot + m_in)
    v = [state[offs[l]:offs[l + 1]] for l in range(len(params))]
    a = [state[n_tot + offs[l]:n_tot + offs[l + 1]] for l in range(len(params))]
    x = state[2 * n_tot:]
    t_out = [[None] * n for n in sizes]
    counts = [np.zeros(n, dtype=np.int64) for n in sizes]
    spikes = []
    step_decay = math.exp(-cfg.dt / tau)

    by_time: dict[int, list[int]] = {}
    for e in events:
        by_time.setdefault(int(e["time"]), []).append(int(e["source"]))

    traj = np.zeros((cfg.duration + 1, n_tot)) if record_trajectory else None
    for t in range(cfg.duration + 1):
        if t > 0:
            state *= step_decay
        if t in by_time and t < cfg.duration:
            current = sorted(by_time[t])  # stable: equal sources keep arrival order
            for k in current:
                x[k] += 1.0
            for l, p in enumerate(params):
                nxt = []
                th = p.thresholds
                for k in current:
                    for i in range(sizes[l]):
                        v[l][i] += p.weights[i, k] * _gain(t, t_out[l][i], p.refractory.t_ref, p.refractory.w_d0)
                        v[l][i] = max(v[l][i], -th[i])
                    for i in range(sizes[l]):
                        if v[l][i] >= th[i]:
                            v[l][i] = min(max(v[l][i] - p.gamma * th[i], -th[i]), th[i])
                            t_out[l][i] = t
                            a[l][i] += 1.0
                            counts[l][i] += 1
                            spikes.append((t, l, i))
                            nxt.append(i)
                            if p.mu != 0.0:
                                for j in range(sizes[l]):
                                    if j != i:
                                        v[l][j] = max(v[l][j] + p.mu * th[j], -th[j])
                current = sorted(nxt)
                if not current:
                    break
        if traj is not None:
            traj[t] = state[:n_tot]
    return DenseResult(
        v_mp=[vi.copy() for vi in v],
        a=[ai.copy() for ai in a],
        x=x.copy(),
        spike_counts=counts,
        spikes=np.array(spikes, dtype=np.int64).reshape(-1, 3),
        trajectory=traj,
    )


def numeric_gradient(f: Callable[[np.ndarray], float], p, h: Optional[float] = None) -> np.ndarray:
    """Central differences, step ``h`` (default ``1e-6 * max(1, |p_i|)``) per coordinate."""
    p = np.array(p, dtype=np.float64)
    grad = np.empty_like(p)
    flat = p.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        step = h if h is not None else 1e-6 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(p)
        flat[i] = orig - step
        f_minus = f(p)
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
