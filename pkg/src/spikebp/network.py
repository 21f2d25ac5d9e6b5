"""Fully connected spiking network: parameters, event-driven forward pass, checkpoints.

All neurons of a layer are touched by every input event to that layer, so a
layer shares one clock. Events carrying equal timestamps are resolved layer by
layer, lowest source index first, then in insertion order; a neuron that fires
inhibits its WTA siblings before the next neuron in index order is checked.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from spikebp.dynamics import EVENT_DTYPE, RefractoryConfig, refractory_gain
from spikebp.regularizers import threshold_regularize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spikebp-checkpoint/1"


@dataclass
class LayerParams:
    weights: np.ndarray  # (N, M)
    thresholds: np.ndarray  # (N,)
    mu: float = 0.0
    sigma: float = 0.5
    gamma: float = 1.0
    tau_mp: float = 20_000.0
    refractory: RefractoryConfig = field(default_factory=RefractoryConfig)
    threshold_floor: float = 1e-3

    def __post_init__(self):
        self.weights = np.asfortranarray(self.weights, dtype=np.float64)
        self.thresholds = np.ascontiguousarray(self.thresholds, dtype=np.float64)
        n, _ = self.weights.shape
        if self.thresholds.shape != (n,):
            raise ValueError(f"thresholds shape {self.thresholds.shape} != ({n},)")
        if not (self.mu == 0.0 or -1.0 <= self.mu < 0.0):
            raise ValueError(f"mu must be 0 or in [-1, 0), got {self.mu}")
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.threshold_floor <= 0:
            raise ValueError("threshold_floor must be positive")
        if np.any(self.thresholds < self.threshold_floor):
            raise ValueError("thresholds below threshold_floor")

    @property
    def n_neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def n_synapses(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.weights.copy(order="F"), self.thresholds.copy(), self.mu, self.sigma,
            self.gamma, self.tau_mp, self.refractory, self.threshold_floor,
        )


@dataclass(frozen=True)
class NetworkTopology:
    sizes: tuple[int, ...]  # (M_in, H_1, ..., H_L, n_out)
    mus: tuple[float, ...]  # one per non-input layer
    sigma: float = 0.5
    gamma: float = 1.0
    tau_mp: float = 20_000.0
    refractory: RefractoryConfig = field(default_factory=RefractoryConfig)

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(int(s) <= 0 for s in self.sizes):
            raise ValueError(f"layer sizes must be positive, got {self.sizes}")
        if len(self.mus) != len(self.sizes) - 1:
            raise ValueError("need one mu per non-input layer")


def init_params(
    topology: NetworkTopology, alpha: float, rng_seed: int, floor_alpha: float = 1.0
) -> list[LayerParams]:
    """Uniform weights on (-sqrt(3/M), sqrt(3/M)); every threshold alpha*sqrt(3/M).

    ``floor_alpha`` sets the threshold floor as ``floor_alpha * sqrt(3/M)``.
    """
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not 0.0 < floor_alpha < alpha:
        raise ValueError("floor_alpha must lie in (0, alpha)")
    rng = np.random.default_rng(rng_seed)
    layers = []
    for m, n, mu in zip(topology.sizes[:-1], topology.sizes[1:], topology.mus):
        bound = math.sqrt(3.0 / m)
        w = rng.uniform(-bound, bound, size=(n, m))
        layers.append(LayerParams(
            weights=w,
            thresholds=np.full(n, alpha * bound),
            mu=float(mu),
            sigma=topology.sigma,
            gamma=topology.gamma,
            tau_mp=topology.tau_mp,
            refractory=topology.refractory,
            threshold_floor=floor_alpha * bound,
        ))
    return layers


def copy_params(params: Sequence[LayerParams]) -> list[LayerParams]:
    return [p.copy() for p in params]


@dataclass
class LayerRecord:
    x: np.ndarray  # input traces at sample end, (M,)
    a: np.ndarray  # output traces at sample end, (N,)
    spike_counts: np.ndarray  # (N,)
    v_mp: np.ndarray  # potentials at sample end, (N,)

    @property
    def active_in(self) -> np.ndarray:
        return self.x > 0

    @property
    def active_out(self) -> np.ndarray:
        return self.spike_counts > 0

    @property
    def m(self) -> int:
        return int(np.count_nonzero(self.x > 0))

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.spike_counts))


@dataclass
class SampleRecord:
    layers: list[LayerRecord]
    duration: int
    spikes: Optional[np.ndarray] = None  # (n_spikes, 3): time, layer, neuron

    @property
    def output_counts(self) -> np.ndarray:
        return self.layers[-1].spike_counts


# ---------------------------------------------------------------------------
# compiled kernel


@njit(cache=True)
def _grow(buf, n):
    if n < buf.shape[0]:
        return buf
    out = np.empty((max(2 * buf.shape[0], n + 1),) + buf.shape[1:], dtype=buf.dtype)
    out[: buf.shape[0]] = buf
    return out


@njit(cache=True)
def _stable_sort(buf, n):
    # insertion sort: same-timestamp groups are almost always tiny
    for i in range(1, n):
        key = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > key:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = key


@njit(cache=True, nogil=True)
def _simulate(
    times, sources, duration,
    weights_t, thresholds, mus, gammas, t_refs, w_d0s, floors, tau,
    rho, train, record_spikes,
    v, t_out, a, a_t, counts, x0, x0_t,
):
    n_layers = len(weights_t)
    n_in = times.shape[0]
    t_layer = np.zeros(n_layers, dtype=np.int64)
    log_buf = np.empty((64, 3), dtype=np.int64)
    n_log = 0
    max_n = 1
    for l in range(n_layers):
        max_n = max(max_n, thresholds[l].shape[0])
    fired = np.empty(max_n, dtype=np.int64)
    cur = np.empty(64, dtype=np.int64)
    nxt = np.empty(64, dtype=np.int64)

    i = 0
    while i < n_in:
        t = times[i]
        j = i
        while j < n_in and times[j] == t:
            j += 1
        n_cur = j - i
        cur = _grow(cur, n_cur)
        for q in range(n_cur):
            cur[q] = sources[i + q]
        _stable_sort(cur, n_cur)
        for q in range(n_cur):
            k = cur[q]
            x0[k] = x0[k] * math.exp((x0_t[k] - t) / tau) + 1.0
            x0_t[k] = t

        for l in range(n_layers):
            if n_cur == 0:
                break
            W = weights_t[l]  # (M, N): column nn is neuron nn's synapses
            th = thresholds[l]
            vl = v[l]
            tl = t_out[l]
            al = a[l]
            alt = a_t[l]
            cl = counts[l]
            n_neur = th.shape[0]
            mu = mus[l]
            gamma = gammas[l]
            t_ref = t_refs[l]
            w_d0 = w_d0s[l]

            if t_layer[l] != t:
                f = math.exp((t_layer[l] - t) / tau)
                for nn in range(n_neur):
                    vl[nn] *= f
                t_layer[l] = t

            n_nxt = 0
            for q in range(n_cur):
                k = cur[q]
                # capacity is ensured here, never inside the per-neuron loops
                if n_nxt + n_neur > nxt.shape[0]:
                    nxt = _grow(nxt, n_nxt + n_neur)
                if record_spikes and n_log + n_neur > log_buf.shape[0]:
                    log_buf = _grow(log_buf, n_log + n_neur)
                for nn in range(n_neur):
                    w = W[k, nn]
                    if tl[nn] >= 0 and t - tl[nn] < t_ref:
                        w *= refractory_gain(float(t), float(tl[nn]), t_ref, w_d0)
                    vn = vl[nn] + w
                    vl[nn] = vn if vn > -th[nn] else -th[nn]
                n_fired = 0
                for nn in range(n_neur):
                    if vl[nn] >= th[nn]:
                        vl[nn] -= gamma * th[nn]
                        if vl[nn] > th[nn]:
                            vl[nn] = th[nn]
                        elif vl[nn] < -th[nn]:
                            vl[nn] = -th[nn]
                        tl[nn] = t
                        al[nn] = al[nn] * math.exp((alt[nn] - t) / tau) + 1.0
                        alt[nn] = t
                        cl[nn] += 1
                        nxt[n_nxt] = nn
                        n_nxt += 1
                        fired[n_fired] = nn
                        n_fired += 1
                        if record_spikes:
                            log_buf[n_log, 0] = t
                            log_buf[n_log, 1] = l
                            log_buf[n_log, 2] = nn
                            n_log += 1
                        if mu != 0.0:
                            for jj in range(n_neur):
                                if jj != nn:
                                    vl[jj] += mu * th[jj]
                                    if vl[jj] < -th[jj]:
                                        vl[jj] = -th[jj]
                if train and n_fired > 0 and rho > 0.0:
                    threshold_regularize(th, W.T, fired[:n_fired], rho, floors[l])
                    for nn in range(n_neur):
                        if vl[nn] > th[nn]:
                            vl[nn] = th[nn]
                        elif vl[nn] < -th[nn]:
                            vl[nn] = -th[nn]
            _stable_sort(nxt, n_nxt)
            cur, nxt = nxt, cur
            n_cur = n_nxt
        i = j

    # bring every lazily kept quantity to the end of the sample
    for k in range(x0.shape[0]):
        if x0[k] != 0.0:
            x0[k] *= math.exp((x0_t[k] - duration) / tau)
        x0_t[k] = duration
    for l in range(n_layers):
        f = math.exp((t_layer[l] - duration) / tau)
        vl = v[l]
        al = a[l]
        alt = a_t[l]
        for nn in range(vl.shape[0]):
            vl[nn] *= f
            if al[nn] != 0.0:
                al[nn] *= math.exp((alt[nn] - duration) / tau)
            alt[nn] = duration
    return log_buf[:n_log].copy()


def _as_stream(events) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return (np.ascontiguousarray(events["time"]), np.ascontiguousarray(events["source"]))
    times = np.fromiter((e.time for e in events), dtype=np.int64)
    sources = np.fromiter((e.source for e in events), dtype=np.int64)
    return times, sources


def forward_sample(
    params: Sequence[LayerParams],
    events,
    duration: int,
    train_mode: bool = False,
    threshold_rho: float = 0.0,
    record_spikes: bool = False,
) -> SampleRecord:
    """Simulate one presentation and return end-of-sample traces and counts.

    In ``train_mode`` with ``threshold_rho > 0`` thresholds (and, at the floor,
    weights) of ``params`` are modified in place as spikes occur.
    """
    times, sources = _as_stream(events)
    if times.size:
        if np.any(np.diff(times) < 0):
            raise ValueError("input events are not sorted by time")
        if times[0] < 0 or times[-1] >= duration:
            raise ValueError(f"event times must lie in [0, {duration})")
        m_in = params[0].n_synapses
        if sources.min() < 0 or sources.max() >= m_in:
            raise ValueError(f"event source out of range [0, {m_in})")
    tau = params[0].tau_mp
    for p in params:
        if p.tau_mp != tau:
            raise ValueError("all layers must share tau_mp")
        if not p.weights.flags.f_contiguous:
            p.weights = np.asfortranarray(p.weights)

    v = tuple(np.zeros(p.n_neurons) for p in params)
    t_out = tuple(np.full(p.n_neurons, -1, dtype=np.int64) for p in params)
    a = tuple(np.zeros(p.n_neurons) for p in params)
    a_t = tuple(np.zeros(p.n_neurons, dtype=np.int64) for p in params)
    counts = tuple(np.zeros(p.n_neurons, dtype=np.int64) for p in params)
    x0 = np.zeros(params[0].n_synapses)
    x0_t = np.zeros(params[0].n_synapses, dtype=np.int64)

    spikes = _simulate(
        times, sources, int(duration),
        # transposes of F-ordered weights are C-ordered even for single-row layers
        tuple(p.weights.T for p in params),
        tuple(p.thresholds for p in params),
        np.array([p.mu for p in params]),
        np.array([p.gamma for p in params]),
        np.array([float(p.refractory.t_ref) for p in params]),
        np.array([p.refractory.w_d0 for p in params]),
        np.array([p.threshold_floor for p in params]),
        float(tau), float(threshold_rho), bool(train_mode), bool(record_spikes),
        v, t_out, a, a_t, counts, x0, x0_t,
    )
    layers = []
    x = x0
    for l in range(len(params)):
        layers.append(LayerRecord(x=x, a=a[l], spike_counts=counts[l], v_mp=v[l]))
        x = a[l]
    return SampleRecord(layers, int(duration), spikes if record_spikes else None)


def predict_label(counts: np.ndarray) -> int:
    """argmax with ties to the lowest index; all-zero counts give 0."""
    if not np.any(counts):
        log.debug("degenerate output: no output spikes")
    return int(np.argmax(counts))


def evaluate(params: Sequence[LayerParams], events, duration: int) -> int:
    rec = forward_sample(params, events, duration, train_mode=False)
    return predict_label(rec.output_counts)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Sequence[LayerParams], seed: int, meta: Optional[dict] = None) -> None:
    """Write a JSON checkpoint. Floats are written with ``repr`` so they round-trip bitwise."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "seed": int(seed),
        "topology": [params[0].n_synapses] + [p.n_neurons for p in params],
        "layers": [
            {
                "mu": p.mu,
                "sigma": p.sigma,
                "gamma": p.gamma,
                "tau_mp": p.tau_mp,
                "t_ref": p.refractory.t_ref,
                "w_d0": p.refractory.w_d0,
                "threshold_floor": p.threshold_floor,
                "thresholds": p.thresholds.tolist(),
                "weights": np.ascontiguousarray(p.weights).tolist(),
            }
            for p in params
        ],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[list[LayerParams], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    params = []
    for d in doc["layers"]:
        params.append(LayerParams(
            weights=np.array(d["weights"], dtype=np.float64),
            thresholds=np.array(d["thresholds"], dtype=np.float64),
            mu=d["mu"], sigma=d["sigma"], gamma=d["gamma"], tau_mp=d["tau_mp"],
            refractory=RefractoryConfig(int(d["t_ref"]), d["w_d0"]),
            threshold_floor=d["threshold_floor"],
        ))
    sizes = [params[0].n_synapses] + [p.n_neurons for p in params]
    if sizes != doc["topology"]:
        raise ValueError(f"{path}: topology {doc['topology']} disagrees with stored weights {sizes}")
    return params, {"seed": doc["seed"], **doc.get("meta", {})}
