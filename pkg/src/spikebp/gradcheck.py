"""Finite-difference check of every analytic derivative in ``spikebp.learning``.

Each random configuration draws a small active layer (at most ``max_width``
neurons and inputs), a lateral strength from ``MUS``, and compares

* d a_i / d s_i, d a_i / d w_ik, d a_i / d V_i, d a_i / d kappa_ih against
  central differences of the explicit right-hand side ``rate_map``;
* d a / d x_k (closed form) against central differences of the solved
  ``transfer_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spikebp import learning as lrn
from spikebp.oracle import numeric_gradient

MUS = (0.0, -0.4, -1.0)
SCALE_FLOOR = 1e-3  # below this magnitude the error is measured absolutely


@dataclass
class GradcheckReport:
    n_configs: int
    n_checks: int = 0
    max_rel_error: float = 0.0
    worst: str = ""
    per_kind: dict = field(default_factory=dict)

    def record(self, kind: str, analytic: float, numeric: float, where: str) -> None:
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), SCALE_FLOOR)
        self.n_checks += 1
        self.per_kind[kind] = max(self.per_kind.get(kind, 0.0), err)
        if err > self.max_rel_error:
            self.max_rel_error = err
            self.worst = f"{kind} {where}: analytic {analytic:.12g}, numeric {numeric:.12g}"


def _instance(rng: np.random.Generator, max_width: int):
    n = int(rng.integers(1, max_width + 1))
    m = int(rng.integers(1, max_width + 1))
    mu = float(MUS[rng.integers(len(MUS))])
    w = rng.uniform(-1.0, 1.0, size=(n, m))
    v = rng.uniform(0.5, 2.0, size=n)
    x = rng.uniform(0.0, 2.0, size=m)
    return n, m, mu, w, v, x


def check_config(rng: np.random.Generator, report: GradcheckReport, max_width: int = 6,
                 sigma: float = 0.5, gamma: float = 1.0) -> None:
    n, m, mu, w, v, x = _instance(rng, max_width)
    kappa = lrn.uniform_kappa(n, mu)
    s = w @ x
    a = lrn.transfer_rate(s, v, mu, sigma, gamma, clip=False)
    tag = f"(n={n}, m={m}, mu={mu})"

    for i in range(n):
        def rhs_s(p, i=i):
            return lrn.rate_map(p, v, a, kappa, sigma, gamma)[i]
        num = numeric_gradient(rhs_s, s)[i]
        report.record("da/ds", float(lrn.d_a_d_s(v[i], gamma)), num, f"{tag} i={i}")

        def rhs_w(p, i=i):
            return lrn.rate_map(p.reshape(n, m) @ x, v, a, kappa, sigma, gamma)[i]
        g_w = numeric_gradient(rhs_w, w.ravel()).reshape(n, m)
        for k in range(m):
            report.record("da/dw", float(lrn.d_a_d_w(v[i], x[k], gamma)), g_w[i, k], f"{tag} i={i} k={k}")

        def rhs_v(p, i=i):
            return lrn.rate_map(s, p, a, kappa, sigma, gamma)[i]
        num = numeric_gradient(rhs_v, v)[i]
        report.record("da/dVth", lrn.d_a_d_vth(v, a, i, kappa, sigma, gamma), num, f"{tag} i={i}")

        for h in range(n):
            if h == i or mu == 0.0:
                continue

            def rhs_k(p, i=i, h=h):
                k2 = kappa.copy()
                k2[i, h] = p[0]
                return lrn.rate_map(s, v, a, k2, sigma, gamma)[i]
            num = numeric_gradient(rhs_k, [kappa[i, h]])[0]
            report.record("da/dkappa", lrn.d_a_d_kappa(v[i], a[h], sigma, gamma), num, f"{tag} i={i} h={h}")

    for k in range(m):
        closed = lrn.d_a_d_x(w[:, k], v, mu, sigma, gamma)

        def solved(p):
            return lrn.transfer_rate(w @ p, v, mu, sigma, gamma, clip=False)
        for i in range(n):
            num = numeric_gradient(lambda p, i=i: solved(p)[i], x)[k]
            report.record("da/dx", float(closed[i]), num, f"{tag} i={i} k={k}")


def run_suite(n_configs: int = 100, seed: int = 0, max_width: int = 6) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport(n_configs)
    for _ in range(n_configs):
        check_config(rng, report, max_width)
    return report
