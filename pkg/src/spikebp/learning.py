"""Backpropagation through spike traces.

The rate model behind everything here is the WTA transfer relation

    a_i = s_i / (gamma * V_i) + (sigma / gamma) * sum_{j != i} kappa_ij * a_j,
    s_i = sum_k w_ik * x_k,

with x and a the end-of-sample exponential traces. Only neurons and synapses
that carried at least one spike take part.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from spikebp.network import LayerParams, SampleRecord
from spikebp.regularizers import RegConfig, exp_reg_grad, exp_reg_step

log = logging.getLogger(__name__)


class DegenerateSystemError(ArithmeticError):
    """The lateral-inhibition system has no unique solution for this configuration."""


class InactiveOutputError(RuntimeError):
    """No output neuron spiked, so there is no error signal to propagate."""


# ---------------------------------------------------------------------------
# transfer function and its derivatives


def uniform_kappa(n: int, mu: float) -> np.ndarray:
    k = np.full((n, n), float(mu))
    np.fill_diagonal(k, 0.0)
    return k


def rate_map(s, thresholds, a, kappa, sigma=0.5, gamma=1.0) -> np.ndarray:
    """Right-hand side of the transfer relation with the other neurons' rates held fixed."""
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(thresholds, dtype=np.float64)
    k = np.array(kappa, dtype=np.float64)
    np.fill_diagonal(k, 0.0)
    return s / (gamma * v) + sigma * (k @ a) / gamma


def transfer_rate(s, thresholds, mu=0.0, sigma=0.5, gamma=1.0, kappa=None, clip=True) -> np.ndarray:
    """Solve the transfer relation for the rates of the given (active) neurons.

    Pass ``kappa`` for a general lateral matrix, otherwise uniform ``mu`` is used.
    Negative solutions are clipped to zero unless ``clip`` is False.
    """
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(thresholds, dtype=np.float64)
    n = s.shape[0]
    if kappa is None:
        if mu == 0.0:
            a = s / (gamma * v)
            return np.maximum(a, 0.0) if clip else a
        kappa = uniform_kappa(n, mu)
    k = np.array(kappa, dtype=np.float64)
    np.fill_diagonal(k, 0.0)
    system = np.eye(n) - (sigma / gamma) * k
    try:
        a = np.linalg.solve(system, s / (gamma * v))
    except np.linalg.LinAlgError as exc:
        raise DegenerateSystemError(f"singular WTA system (mu/kappa, sigma={sigma})") from exc
    return np.maximum(a, 0.0) if clip else a


def _check_vth(v):
    if np.any(np.asarray(v) <= 0):
        raise ValueError("thresholds must be positive")


def d_a_d_s(v_th, gamma=1.0):
    _check_vth(v_th)
    return 1.0 / (gamma * np.asarray(v_th, dtype=np.float64))


def d_a_d_w(v_th, x_k, gamma=1.0):
    return d_a_d_s(v_th, gamma) * x_k


def d_a_d_vth(thresholds, a, i, kappa, sigma=0.5, gamma=1.0) -> float:
    """Partial of a_i w.r.t. its own threshold, other rates held fixed."""
    v_i = thresholds[i]
    lateral = sum(kappa[i][j] * a[j] for j in range(len(a)) if j != i)
    return float(d_a_d_s(v_i, gamma) * (-gamma * a[i] + sigma * lateral))


def d_a_d_kappa(v_th_i, a_h, sigma=0.5, gamma=1.0) -> float:
    return float(d_a_d_s(v_th_i, gamma) * sigma * v_th_i * a_h)


def d_a_d_x_inverse(w_col, thresholds, kappa, sigma=0.5, gamma=1.0) -> np.ndarray:
    """Matrix-inverse form: (1/sigma) * (q I - K)^-1 (w/V), q = gamma/sigma."""
    b = np.asarray(w_col, dtype=np.float64) / np.asarray(thresholds, dtype=np.float64)
    k = np.array(kappa, dtype=np.float64)
    np.fill_diagonal(k, 0.0)
    n = b.shape[0]
    mat = (gamma / sigma) * np.eye(n) - k
    try:
        return np.linalg.inv(mat) @ b / sigma
    except np.linalg.LinAlgError as exc:
        raise DegenerateSystemError("singular lateral matrix") from exc


def wta_denominators(n: int, mu: float, sigma: float, gamma: float) -> tuple[float, float]:
    d1 = gamma + mu * sigma
    d2 = gamma - mu * sigma * (n - 1)
    if d1 == 0.0 or d2 == 0.0:
        raise DegenerateSystemError(f"degenerate WTA denominators for n={n}, mu={mu}, sigma={sigma}")
    return d1, d2


def d_a_d_x(w_col, thresholds, mu, sigma=0.5, gamma=1.0) -> np.ndarray:
    """Closed form of the matrix-inverse derivative for uniform lateral strength ``mu``.

    (1/(gamma + mu*sigma)) * (w_i/V_i + mu*sigma/(gamma - mu*sigma*(n-1)) * sum_j w_j/V_j)
    """
    b = np.asarray(w_col, dtype=np.float64) / np.asarray(thresholds, dtype=np.float64)
    _check_vth(thresholds)
    if mu == 0.0:
        return b / gamma
    d1, d2 = wta_denominators(b.shape[0], mu, sigma, gamma)
    return (b + (mu * sigma / d2) * b.sum()) / d1


def effective_output(a, mu=0.0, sigma=0.5, gamma=1.0) -> np.ndarray:
    """a_hat_i = gamma*a_i - sigma * sum_{j != i} kappa_ij a_j for uniform kappa."""
    a = np.asarray(a, dtype=np.float64)
    return gamma * a - sigma * mu * (a.sum() - a)


# ---------------------------------------------------------------------------
# objective


def output_activity(spike_counts) -> tuple[np.ndarray, bool]:
    """Counts divided by the largest count; returns (activity, degenerate)."""
    c = np.asarray(spike_counts, dtype=np.float64)
    top = c.max() if c.size else 0.0
    if top <= 0:
        return np.zeros_like(c), True
    return c / top, False


def one_hot(label: int, n: int = 10) -> np.ndarray:
    y = np.zeros(n)
    y[label] = 1.0
    return y


def loss(a, y, reg_terms: float = 0.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if a.shape != y.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {y.shape}")
    return 0.5 * float(np.sum((a - y) ** 2)) + float(reg_terms)


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class LayerGrad:
    delta: np.ndarray  # (N,), zero for inactive neurons
    rows: np.ndarray  # active neuron indices
    cols: np.ndarray  # active synapse indices
    block: np.ndarray  # (len(rows), len(cols)) weight gradient on the active block
    dVth: np.ndarray  # (N,)
    shape: tuple[int, int]

    @property
    def dW(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[np.ix_(self.rows, self.cols)] = self.block
        return out


@dataclass
class GradientBundle:
    layers: list[LayerGrad]


def backprop_weights(weights_active, thresholds_active, mu, sigma, gamma) -> np.ndarray:
    """Rows of the downstream weight matrix as seen through the WTA (active rows only).

    Row j is gamma*V_j times d a_j / d x, so that sum_j row_j * delta_j is the
    error reaching each input.
    """
    w = np.asarray(weights_active, dtype=np.float64)
    if mu == 0.0 or w.shape[0] == 0:
        return w
    v = np.asarray(thresholds_active, dtype=np.float64)
    d1, d2 = wta_denominators(w.shape[0], mu, sigma, gamma)
    colsum = (w / v[:, None]).sum(axis=0)
    return (gamma / d1) * (w + (mu * sigma / d2) * v[:, None] * colsum[None, :])


def output_delta(spike_counts, y) -> np.ndarray:
    """Output error with the max count held constant: (a - y) / max count.

    Silent units keep their error: a silent target still has live inputs and
    must be able to learn to fire.
    """
    c = np.asarray(spike_counts, dtype=np.float64)
    a, degenerate = output_activity(c)
    if degenerate:
        raise InactiveOutputError("output layer produced no spikes")
    return (a - y) / c.max()


def normalized_delta(back, thresholds, active, m_up, big_m_up) -> np.ndarray:
    """Scale back-projected error by (g_i / g_bar) * sqrt(M/m) with g = 1/V_th over active neurons."""
    delta = np.zeros_like(back)
    if not np.any(active) or m_up == 0:
        return delta
    g = 1.0 / thresholds[active]
    g_bar = math.sqrt(float(np.mean(g * g)))
    delta[active] = (g / g_bar) * math.sqrt(big_m_up / m_up) * back[active]
    return delta


def backward(record: SampleRecord, params: Sequence[LayerParams], y, silent_error: bool = False) -> GradientBundle:
    """Per-layer errors and the weight and threshold gradients for one train-mode sample.

    With ``silent_error`` an all-silent output layer is not an error: its
    units get ``-y``, and error also passes down through silent output units
    (such as a silent target). Otherwise only firing units pass error down, and
    nothing propagates below a silent hidden layer.
    """
    y = np.asarray(y, dtype=np.float64)
    n_layers = len(params)
    deltas: list[Optional[np.ndarray]] = [None] * n_layers
    counts = record.layers[-1].spike_counts
    if silent_error and not np.any(counts):
        deltas[-1] = -y
    else:
        deltas[-1] = output_delta(counts, y)

    for l in range(n_layers - 2, -1, -1):
        up = params[l + 1]
        up_rec = record.layers[l + 1]
        act_up = up_rec.active_out
        if silent_error and l == n_layers - 2:
            act_up = act_up | (deltas[-1] != 0.0)
        if not np.any(act_up):
            if not silent_error:
                raise InactiveOutputError(f"layer {l + 1} has no active neurons")
            deltas[l] = np.zeros(params[l].n_neurons)
            continue
        w_eff = backprop_weights(up.weights[act_up], up.thresholds[act_up], up.mu, up.sigma, up.gamma)
        back = w_eff.T @ deltas[l + 1][act_up]
        deltas[l] = normalized_delta(
            back, params[l].thresholds, record.layers[l].active_out,
            m_up=up_rec.m, big_m_up=up.n_synapses,
        )

    grads = []
    for l, (p, rec) in enumerate(zip(params, record.layers)):
        delta = deltas[l]
        rows = np.flatnonzero(rec.active_out | (delta != 0.0))
        cols = np.flatnonzero(rec.active_in)
        n_big, m_big = p.weights.shape
        m = cols.size
        dvth = np.zeros(n_big)
        if m == 0 or rows.size == 0:
            block = np.zeros((rows.size, m))
        else:
            scale_w = math.sqrt(n_big / m)
            block = scale_w * np.outer(delta[rows], rec.x[cols])
            a_hat = effective_output(rec.a[rows], p.mu, p.sigma, p.gamma)
            dvth[rows] = -math.sqrt(n_big / (m * m_big)) * delta[rows] * a_hat
        grads.append(LayerGrad(delta, rows, cols, block, dvth, (n_big, m_big)))
    return GradientBundle(grads)


# ---------------------------------------------------------------------------
# optimizers and updates


@dataclass
class OptimizerState:
    mode: str = "sgd"  # "sgd" or "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")

    def adam_step(self, key, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return the ADAM increment for ``grad`` (``step`` must already count this sample)."""
        if key not in self.moments:
            self.moments[key] = (np.zeros_like(grad), np.zeros_like(grad))
        m, v = self.moments[key]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** self.step)
        v_hat = v / (1.0 - self.beta2 ** self.step)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


def floor_thresholds(p: LayerParams) -> None:
    """Hold thresholds at the floor; each of the neuron's weights grows by the shortfall instead."""
    low = p.thresholds < p.threshold_floor
    if np.any(low):
        short = p.threshold_floor - p.thresholds[low]
        p.thresholds[low] = p.threshold_floor
        p.weights[low, :] += short[:, None]


def apply_updates(
    params: Sequence[LayerParams],
    bundle: Optional[GradientBundle],
    opt: OptimizerState,
    eta_w: float,
    eta_th: float,
    reg: Optional[RegConfig] = None,
) -> None:
    """Apply one sample's updates in place.

    ``bundle=None`` applies only the weight regularizer. Exponential decay acts
    on hidden layers, and on the output layer too if ``reg.output`` is set.
    Raises FloatingPointError before touching parameters if any increment is
    non-finite.
    """
    n_layers = len(params)
    if opt.mode == "adam":
        opt.step += 1
    staged = []
    for l, p in enumerate(params):
        g = bundle.layers[l] if bundle is not None else None
        decays = reg is not None and reg.lam > 0 and (l < n_layers - 1 or reg.output)
        if opt.mode == "sgd":
            dw_block = -eta_w * g.block if g is not None else None
            dw_reg = exp_reg_step(p.weights, reg, eta_w) if decays else None
            dth = -eta_th * g.dVth if g is not None else None
            staged.append((dw_block, dw_reg, dth))
        else:
            grad_w = g.dW if g is not None else np.zeros(p.weights.shape)
            if decays:
                grad_w = grad_w + exp_reg_grad(p.weights, reg)
            grad_th = g.dVth if g is not None else np.zeros(p.n_neurons)
            staged.append((opt.adam_step((l, "w"), grad_w, eta_w), None, opt.adam_step((l, "th"), grad_th, eta_th)))
    for parts in staged:
        for arr in parts:
            if arr is not None and not np.all(np.isfinite(arr)):
                raise FloatingPointError("non-finite parameter update")
    for l, (p, (dw, dw_reg, dth)) in enumerate(zip(params, staged)):
        if opt.mode == "sgd":
            g = bundle.layers[l] if bundle is not None else None
            if dw_reg is not None:
                p.weights += dw_reg
            if g is not None and g.rows.size and g.cols.size:
                p.weights[np.ix_(g.rows, g.cols)] += dw
        else:
            p.weights += dw
        if dth is not None:
            p.thresholds += dth
        floor_thresholds(p)
