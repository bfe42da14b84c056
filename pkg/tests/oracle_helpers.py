"""Independent numerical references shared by the test modules.

Everything here deliberately avoids the closed-form frequency-space route the
library uses for influence coefficients: the bath correlation function is
integrated by adaptive quadrature and the window integrals by 2-D
trapezoid refinement with Richardson extrapolation.
"""

import numpy as np
from scipy.integrate import quad

from quapi.bath import evaluate_sd, omega_cutoff


def correlation_quad(sd, k_bt, u, wmax=None):
    """C(u) by plain adaptive quadrature (supports u < 0 by conjugation)."""
    if u < 0:
        return np.conj(correlation_quad(sd, k_bt, -u, wmax))
    if wmax is None:
        wmax = omega_cutoff(sd)
    re = quad(lambda w: evaluate_sd(sd, w) / np.tanh(w / (2 * k_bt)) * np.cos(w * u),
              1e-12, wmax, limit=800, epsabs=1e-15, epsrel=1e-13)[0]
    im = quad(lambda w: evaluate_sd(sd, w) * np.sin(w * u),
              1e-12, wmax, limit=800, epsabs=1e-15, epsrel=1e-13)[0]
    return (re - 1j * im) / np.pi


class CorrelationCache:
    def __init__(self, sd, k_bt):
        self.sd = sd
        self.k_bt = k_bt
        self._cache = {}

    def __call__(self, u):
        key = round(float(u), 13)
        if key not in self._cache:
            self._cache[key] = correlation_quad(self.sd, self.k_bt, key)
        return self._cache[key]


def pair_window_quad(cfun, a1, a2, b1, b2, levels=(16, 32, 64, 128)):
    """int_A dt' int_B dt'' C(t'-t'') by 2-D trapezoid + Richardson."""
    def trap(n):
        tp = np.linspace(a1, a2, n + 1)
        ts = np.linspace(b1, b2, n + 1)
        vals = np.array([[cfun(x - y) for y in ts] for x in tp])
        w = np.ones(n + 1)
        w[0] = w[-1] = 0.5
        return (a2 - a1) / n * (b2 - b1) / n * np.einsum("i,ij,j->", w, vals, w)

    v = [trap(n) for n in levels]
    for k in range(1, len(levels)):
        fac = 4.0**k
        v = [(fac * v[i + 1] - v[i]) / (fac - 1) for i in range(len(v) - 1)]
    return v[0]


def ordered_window_quad(cfun, a1, a2, levels=(64, 128, 256)):
    """int over the time-ordered triangle of one window, via the lag form
    int_0^L (L-u) C(u) du."""
    length = a2 - a1

    def trap(n):
        u = np.linspace(0.0, length, n + 1)
        vals = np.array([(length - x) * cfun(x) for x in u])
        w = np.ones(n + 1)
        w[0] = w[-1] = 0.5
        return length / n * np.sum(w * vals)

    v = [trap(n) for n in levels]
    for k in range(1, len(levels)):
        fac = 4.0**k
        v = [(fac * v[i + 1] - v[i]) / (fac - 1) for i in range(len(v) - 1)]
    return v[0]


def eta_entry_quad(sd, k_bt, dt, i, j, n_points):
    """eta_{ij} for an n_points trajectory straight from the window geometry."""
    cfun = CorrelationCache(sd, k_bt)
    last = n_points - 1

    def window(k):
        if k == 0:
            return 0.0, dt / 2
        if k == last:
            return k * dt - dt / 2, k * dt
        return k * dt - dt / 2, k * dt + dt / 2

    a1, a2 = window(i)
    if i == j:
        return ordered_window_quad(cfun, a1, a2)
    b1, b2 = window(j)
    return pair_window_quad(cfun, a1, a2, b1, b2)


def influence_double_sum(emat, qf, qb):
    """exp(-sum_ij (qf_i - qb_i)(E_ij qf_j - E*_ij qb_j)) evaluated directly."""
    expo = 0j
    n = len(qf)
    for i in range(n):
        for j in range(i + 1):
            expo += (qf[i] - qb[i]) * (emat[i, j] * qf[j] - np.conj(emat[i, j]) * qb[j])
    return np.exp(-expo)


def dense_grid_correlation(sd, k_bt, t, n=1_000_000):
    """Fixed-grid trapezoid reference for C(t)."""
    wmax = omega_cutoff(sd)
    w = np.linspace(1e-9, wmax, n)
    j = evaluate_sd(sd, w)
    re = np.trapezoid(j / np.tanh(w / (2 * k_bt)) * np.cos(w * t), w) / np.pi
    im = np.trapezoid(j * np.sin(w * t), w) / np.pi
    return re - 1j * im


def dense_grid_dephasing_magnitude(sd, k_bt, dq, t, n=1_000_000):
    """|coherence factor| by fixed-grid trapezoid quadrature."""
    wmax = omega_cutoff(sd)
    w = np.linspace(1e-9, wmax, n)
    j = evaluate_sd(sd, w)
    gam = np.trapezoid(j / np.tanh(w / (2 * k_bt)) * (1 - np.cos(w * t)) / w**2, w)
    return np.exp(-dq**2 * gam / np.pi)
