"""Exponential weight decay, per-event threshold balancing, and epoch schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class RegConfig:
    lam: float = 0.002
    beta: float = 10.0
    rho: float = 0.0001
    epoch_decay: float = math.exp(-1.0 / 35.0)
    output: bool = False  # also decay output-layer weights

    def __post_init__(self):
        if self.lam < 0 or self.beta <= 0 or self.rho < 0:
            raise ValueError("lam and rho must be non-negative, beta positive")
        if not 0.0 < self.epoch_decay < 1.0:
            raise ValueError("epoch_decay must lie in (0, 1)")


def _row_scale(weights, cfg: RegConfig) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    sq = np.sum(w * w, axis=-1)
    with np.errstate(over="ignore"):
        scale = np.exp(cfg.beta * (sq - 1.0))
    if not np.all(np.isfinite(scale)):
        worst = float(np.max(sq))
        raise FloatingPointError(
            f"exponential regularizer overflow: max row sum of squares {worst:.4g}, beta={cfg.beta}"
        )
    return scale


def exp_reg_cost(weights, cfg: RegConfig):
    """0.5*lam*exp(beta*(sum w^2 - 1)) per row; a scalar for a 1-D row."""
    return 0.5 * cfg.lam * _row_scale(weights, cfg)


def exp_reg_grad(weights, cfg: RegConfig) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    scale = cfg.lam * cfg.beta * _row_scale(w, cfg)
    return np.expand_dims(scale, -1) * w


@njit(cache=True, nogil=True)
def _backward_euler_scale(w2d, c, beta):
    """Per-row factor ``-h/(1+h)`` of the backward-Euler decay step."""
    n, m = w2d.shape
    out = np.empty(n)
    sq = np.zeros(n)
    for k in range(m):  # column-outer suits the F-ordered layer weights
        for i in range(n):
            sq[i] += w2d[i, k] * w2d[i, k]
    for i in range(n):
        s0 = sq[i]
        # Newton on the convex, increasing g(s) = s*(1 + h(s))^2 - s0, from the
        # right; the start is capped so exp cannot overflow and g stays >= 0
        s = min(s0, 1.0 + 50.0 / beta)
        for _ in range(100):
            h = c * math.exp(beta * (s - 1.0))
            g = s * (1.0 + h) ** 2 - s0
            dg = (1.0 + h) ** 2 + 2.0 * s * (1.0 + h) * h * beta
            step = g / dg
            s = max(s - step, 0.0)
            if step <= 1e-14 * s0:
                break
        h = c * math.exp(beta * (s - 1.0))
        out[i] = -h / (1.0 + h)
    return out


def exp_reg_step(weights, cfg: RegConfig, eta: float) -> np.ndarray:
    """Weight increment of one backward-Euler decay step of size ``eta``.

    Solves ``w' = w - eta*exp_reg_grad(w')``, i.e. ``w' = w/(1 + h(w'))`` with
    ``h(w) = eta*lam*beta*exp(beta*(sum w^2 - 1))``. For small ``h`` this is the
    plain gradient step to first order; unlike the explicit step it cannot
    overshoot and diverge when a row norm grows large.
    """
    w = np.asarray(weights, dtype=np.float64)
    scale = _backward_euler_scale(np.atleast_2d(w), eta * cfg.lam * cfg.beta, cfg.beta)
    if w.ndim == 1:
        return scale[0] * w
    return scale[:, None] * w


@njit(cache=True, nogil=True)
def threshold_regularize(thresholds, weights, fired, rho, floor):
    """In-place threshold balancing after one input event.

    Neurons in ``fired`` gain ``rho*N``; then every neuron loses ``rho*len(fired)``.
    A threshold that would fall below ``floor`` is held at the floor and every
    one of the neuron's weights grows by the shortfall instead.
    """
    n = thresholds.shape[0]
    n_w = fired.shape[0]
    if n_w == 0:
        return
    up = rho * n
    down = rho * n_w
    for q in range(n_w):
        thresholds[fired[q]] += up
    m = weights.shape[1]
    for i in range(n):
        thresholds[i] -= down
        if thresholds[i] < floor:
            short = floor - thresholds[i]
            thresholds[i] = floor
            for k in range(m):
                weights[i, k] += short


def epoch_schedule(eta_w: float, rho: float, epoch: int, cfg: RegConfig) -> tuple[float, float]:
    """Learning rate and rho to use during ``epoch`` (0-based), given their initial values."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    f = cfg.epoch_decay ** epoch
    return eta_w * f, rho * f
