"""Independent brute-force references for the propagation engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .bath import eta_coefficient_matrix, evaluate_sd, omega_cutoff, _integration_points

__all__ = [
    "OracleLimits",
    "OracleLimitError",
    "direct_path_sum",
    "analytic_dephasing",
]


class OracleLimitError(ValueError):
    pass


@dataclass(frozen=True)
class OracleLimits:
    max_states: int = 3
    max_steps: int = 7
    max_paths: float = 5e6

    def check(self, m, n):
        if m > self.max_states or n > self.max_steps or m ** (2 * n) > self.max_paths:
            raise OracleLimitError(
                f"direct path sum refused: M={m}, N={n} exceeds the enumeration limits")


def direct_path_sum(system, eta, rho0, n_steps, limits=OracleLimits()):
    """Full evaluation of the discretized path sum for rho(n_steps * dt).

    All forward/backward path pairs are enumerated; each contributes the
    initial matrix element, the product of short-time propagator factors and
    the complete double-sum influence factor (measurement-step coefficient
    class applied to the last row).
    """
    m = system.m
    limits.check(m, n_steps)
    rho0 = np.asarray(rho0, dtype=complex)
    n_pts = n_steps + 1
    paths = _all_paths(m, n_pts)                      # (P, n_pts)
    qp = system.q[paths]                              # (P, n_pts)

    # propagator product along each forward path / backward path
    sf = np.ones(len(paths), dtype=complex)
    sb = np.ones(len(paths), dtype=complex)
    for j in range(1, n_pts):
        sf *= system.u_fwd[paths[:, j], paths[:, j - 1]]
        sb *= system.u_bwd[paths[:, j - 1], paths[:, j]]

    # exponent(f, b) = sum_ij (qf_i - qb_i)(E_ij qf_j - E*_ij qb_j), expanded
    # into four bilinear pieces over the forward x backward path grid
    emat = eta_coefficient_matrix(eta, n_pts, terminal=True)
    a_ff = np.einsum("pi,ij,pj->p", qp, emat, qp)
    a_bb = np.einsum("pi,ij,pj->p", qp, np.conj(emat), qp)
    cross_fb = qp @ np.conj(emat)                     # rows f: sum_i qf_i E*_ij
    cross_bf = qp @ emat.T                            # rows f: sum_j E_ij qf_j over i

    rho = np.zeros((m, m), dtype=complex)
    starts = paths[:, 0]
    ends = paths[:, -1]
    chunk = max(1, int(2e7) // max(1, len(paths)))
    for lo in range(0, len(paths), chunk):
        hi = min(lo + chunk, len(paths))
        expo = (a_ff[lo:hi, None]
                - cross_fb[lo:hi] @ qp.T              # - sum_ij qf_i E*_ij qb_j
                - cross_bf[lo:hi] @ qp.T              # - sum_ij qb_i E_ij qf_j
                + a_bb[None, :])
        contrib = (rho0[starts[lo:hi][:, None], starts[None, :]]
                   * (sf[lo:hi, None] * sb[None, :]) * np.exp(-expo))
        np.add.at(rho, (ends[lo:hi][:, None], ends[None, :]), contrib)
    return rho


def _all_paths(m, n_pts):
    grids = np.meshgrid(*([np.arange(m)] * n_pts), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def analytic_dephasing(sd, k_bt, dq, omega01, t):
    """Exact coherence factor for a system Hamiltonian diagonal in the DVR basis.

    Returns exp(-i*omega01*t) * exp(-Gamma(t) - i*Phi(t)) with

        Gamma = (dq^2/pi) int J(w) coth(w/2kT) (1 - cos wt) / w^2 dw
        Phi   = (dq^2/pi) int J(w) (sin wt - wt) / w^2 dw
    """
    if k_bt <= 0:
        raise ValueError("k_bt must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0.0:
        return 1.0 + 0j
    wmax = omega_cutoff(sd)
    pts = _integration_points(sd)

    def coth(x):
        return 1.0 / np.tanh(x)

    def gamma_integrand(w):
        if w == 0.0:
            w = 1e-12 * wmax
        return evaluate_sd(sd, w) * coth(w / (2 * k_bt)) * (1 - np.cos(w * t)) / w**2

    def phi_integrand(w):
        if w == 0.0:
            return 0.0
        return evaluate_sd(sd, w) * (np.sin(w * t) - w * t) / w**2

    gam = _split_quad(gamma_integrand, 0.0, wmax, pts)
    phi = _split_quad(phi_integrand, 0.0, wmax, pts)
    gam *= dq**2 / np.pi
    phi *= dq**2 / np.pi
    return np.exp(-1j * omega01 * t) * np.exp(-gam - 1j * phi)


def _split_quad(f, a, b, points, epsrel=1e-11):
    cuts = [a] + sorted(p for p in points if a < p < b) + [b]
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        val, _ = quad(f, lo, hi, epsabs=1e-14, epsrel=epsrel, limit=800)
        total += val
    return total
