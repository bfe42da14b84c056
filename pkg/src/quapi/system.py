"""System Hamiltonians, short-time propagators and the reaction-coordinate model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bath import reorganization_energy

__all__ = [
    "SystemModel",
    "RCModelSpec",
    "counter_term_coefficient",
    "build_renormalized_hamiltonian",
    "short_time_propagators",
    "build_system_model",
    "build_reaction_coordinate_model",
    "map_structured_to_rc",
    "rc_coupling_to_alpha",
    "perturbative_gaps",
    "sigma_z_observable",
    "tls_up_vib_ground_density",
]

HERMITICITY_TOL = 1e-10


def _check_hermitian(h, tol=HERMITICITY_TOL, what="Hamiltonian"):
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"{what} must be a square matrix")
    if np.max(np.abs(h - h.conj().T)) > tol:
        raise ValueError(f"{what} is not Hermitian within {tol:g}")
    return 0.5 * (h + h.conj().T)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """DVR system: coupling coordinates, renormalized Hamiltonian, propagators."""

    m: int
    q: np.ndarray
    h: np.ndarray
    h_a: np.ndarray
    u_fwd: np.ndarray
    u_bwd: np.ndarray


@dataclass(frozen=True)
class RCModelSpec:
    """Two-level system plus one explicit harmonic mode.

    ``delta``: tunneling splitting, ``omega``: mode frequency, ``g``: TLS-mode
    coupling, ``n_vib``: oscillator basis truncation, ``epsilon``: TLS bias
    (zero for the unbiased case studied here).
    """

    delta: float
    omega: float
    g: float
    n_vib: int
    epsilon: float = 0.0

    def __post_init__(self):
        if self.n_vib < 1:
            raise ValueError("n_vib must be at least 1")
        if self.delta <= 0 or self.omega <= 0:
            raise ValueError("delta and omega must be positive")

    @property
    def m(self):
        return 2 * self.n_vib


def counter_term_coefficient(sd):
    """Counter-term prefactor c = (1/pi) * int J(w)/w dw = lambda/pi."""
    return reorganization_energy(sd) / np.pi


def build_renormalized_hamiltonian(h, q, sd):
    """H_a = H - c * diag(q_i^2), the adiabatically renormalized Hamiltonian."""
    h = _check_hermitian(h)
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size != h.shape[0]:
        raise ValueError("coordinate vector length must match the Hamiltonian dimension")
    if not np.all(np.isfinite(q)):
        raise ValueError("coupling coordinates must be finite")
    c = counter_term_coefficient(sd)
    return h - c * np.diag(q**2).astype(complex)


def short_time_propagators(h_a, dt):
    """(U_fwd, U_bwd) = (exp(-i H_a dt), exp(+i H_a dt)) via eigendecomposition."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    h_a = _check_hermitian(h_a, what="renormalized Hamiltonian")
    evals, vecs = np.linalg.eigh(h_a)
    u_fwd = (vecs * np.exp(-1j * evals * dt)) @ vecs.conj().T
    return u_fwd, u_fwd.conj().T


def build_system_model(h, q, sd, dt):
    """Assemble a SystemModel from an explicit Hamiltonian and coordinates."""
    h = _check_hermitian(h)
    h_a = build_renormalized_hamiltonian(h, q, sd) if sd is not None else h
    u_fwd, u_bwd = short_time_propagators(h_a, dt)
    return SystemModel(m=h.shape[0], q=np.asarray(q, dtype=float).copy(),
                       h=h, h_a=h_a, u_fwd=u_fwd, u_bwd=u_bwd)


def _ladder_x(n_vib):
    """Truncated position-like operator B^dagger + B on n_vib levels."""
    n = np.arange(n_vib)
    bdag = np.diag(np.sqrt(n[1:]), -1).astype(complex)
    return bdag + bdag.conj().T


def build_reaction_coordinate_model(spec, dt, sd=None):
    """Extended TLS + harmonic-mode system rotated into the coupling eigenbasis.

    The 2*n_vib Hamiltonian (delta/2) sx + eps/2 sz + g sz (B^+ + B) + omega B^+B
    is expressed in the eigenbasis of the truncated coupling operator
    I_2 x (B^+ + B); the coupling coordinates are its eigenvalues, one copy
    per TLS state. Passing the residual bath ``sd`` applies the counter term.
    """
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    nv = spec.n_vib
    x = _ladder_x(nv)
    num = np.diag(np.arange(nv)).astype(complex)
    h = (0.5 * spec.delta * np.kron(sx, np.eye(nv))
         + 0.5 * spec.epsilon * np.kron(sz, np.eye(nv))
         + spec.g * np.kron(sz, x)
         + spec.omega * np.kron(np.eye(2), num))

    xi, w = np.linalg.eigh(x)
    v = np.kron(np.eye(2, dtype=complex), w)
    h_dvr = v.conj().T @ h @ v
    h_dvr = 0.5 * (h_dvr + h_dvr.conj().T)
    q = np.concatenate([xi, xi])  # one eigenvalue per TLS state
    return build_system_model(h_dvr, q, sd, dt)


def map_structured_to_rc(alpha, omega, kappa):
    """TLS-mode coupling from the peak parameters: g = omega*sqrt(alpha/(8 kappa))."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return omega * np.sqrt(alpha / (8.0 * kappa))


def rc_coupling_to_alpha(g, omega, kappa):
    """Inverse map: alpha = 8 kappa g^2 / omega^2."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return 8.0 * kappa * g**2 / omega**2


def perturbative_gaps(delta, omega, g):
    """Small-g predictors for the two lowest transition energies."""
    if delta == omega:
        return delta - g, delta + g
    shift = g**2 / (delta - omega)
    return omega - shift, delta + shift


def sigma_z_observable(n_vib):
    """sigma_z x I_vib in the DVR ordering used by the reaction-coordinate model."""
    return np.kron(np.diag([1.0, -1.0]), np.eye(n_vib)).astype(complex)


def tls_up_vib_ground_density(n_vib):
    """|sigma_z=+1> x |0_vib> density matrix, expressed in the DVR basis."""
    x = _ladder_x(n_vib)
    _, w = np.linalg.eigh(x)
    # vibrational ground state in the coupling eigenbasis
    ground = w.conj().T @ np.eye(n_vib, 1, dtype=complex)
    psi = np.zeros((2 * n_vib, 1), dtype=complex)
    psi[:n_vib] = ground
    return psi @ psi.conj().T
