"""Spectral densities, bath correlation function and influence coefficients.

Units: hbar = k_B = 1. Energies are expressed in an arbitrary base unit
(cm^-1, or the tunneling splitting Delta set to 1); times in inverse energy.
"""

from __future__ import annotations

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import quad

__all__ = [
    "OhmicSD",
    "StructuredPeakSD",
    "TabulatedSD",
    "EtaTable",
    "QuadratureError",
    "evaluate_sd",
    "omega_cutoff",
    "reorganization_energy",
    "bath_correlation",
    "compute_eta_table",
    "influence_increment",
    "eta_coefficient_matrix",
    "eta_table_to_bytes",
    "eta_table_from_bytes",
    "write_eta_table",
    "read_eta_table",
    "sd_content_hash",
]

ETA_MAGIC = b"ETA1"


class QuadratureError(RuntimeError):
    """Raised when an adaptive integral fails to converge.

    For influence-coefficient integrals the offending lag is attached.
    """

    def __init__(self, message, lag=None):
        super().__init__(message)
        self.lag = lag


@dataclass(frozen=True)
class OhmicSD:
    """J(w) = (gamma/pi) * w * exp(-w/omega_c)."""

    gamma: float
    omega_c: float

    def __post_init__(self):
        if self.gamma < 0 or self.omega_c <= 0:
            raise ValueError("Ohmic form needs gamma >= 0 and omega_c > 0")


@dataclass(frozen=True)
class StructuredPeakSD:
    """Sharp resonance of width 2*pi*kappa*omega0 on an Ohmic background.

    J(w) = 2*alpha*w*omega0^4 / ((omega0^2 - w^2)^2 + (2*pi*kappa*w*omega0)^2)
    """

    alpha: float
    omega0: float
    kappa: float

    def __post_init__(self):
        if self.alpha < 0 or self.omega0 <= 0 or self.kappa <= 0:
            raise ValueError("StructuredPeak needs alpha >= 0, omega0 > 0, kappa > 0")


@dataclass(frozen=True, eq=False)
class TabulatedSD:
    """Pointwise J(w), linearly interpolated, zero outside the grid."""

    omega: np.ndarray
    j: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        j = np.asarray(self.j, dtype=float)
        if omega.ndim != 1 or omega.shape != j.shape or omega.size < 2:
            raise ValueError("tabulated grid needs matching 1-d arrays of length >= 2")
        if np.any(np.diff(omega) <= 0):
            raise ValueError("tabulated grid must be strictly increasing in omega")
        if omega[0] < 0:
            raise ValueError("tabulated grid must start at omega >= 0")
        if np.any(j < 0):
            raise ValueError("J(omega) must be non-negative")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "j", j)


SpectralDensity = OhmicSD | StructuredPeakSD | TabulatedSD


def evaluate_sd(sd, omega):
    """Evaluate J(omega) for omega >= 0 (scalar or array)."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise ValueError("spectral density is defined for omega >= 0")
    if isinstance(sd, OhmicSD):
        out = sd.gamma / np.pi * w * np.exp(-w / sd.omega_c)
    elif isinstance(sd, StructuredPeakSD):
        w0 = sd.omega0
        out = 2.0 * sd.alpha * w * w0**4 / ((w0**2 - w**2) ** 2 + (2.0 * np.pi * sd.kappa * w * w0) ** 2)
    elif isinstance(sd, TabulatedSD):
        out = np.interp(w, sd.omega, sd.j, left=0.0, right=0.0)
        out = np.where((w < sd.omega[0]) | (w > sd.omega[-1]), 0.0, out)
    else:
        raise TypeError(f"unknown spectral density type {type(sd)!r}")
    if np.isscalar(omega) or np.ndim(omega) == 0:
        return float(out)
    return out


def omega_cutoff(sd):
    """Upper integration limit: max(50 * cutoff-equivalent, 20 * peak frequency)."""
    if isinstance(sd, OhmicSD):
        return 50.0 * sd.omega_c
    if isinstance(sd, StructuredPeakSD):
        return max(50.0 * sd.omega0, 20.0 * sd.omega0)
    if isinstance(sd, TabulatedSD):
        return float(sd.omega[-1])
    raise TypeError(f"unknown spectral density type {type(sd)!r}")


def _integration_points(sd):
    """Interior break points the adaptive quadrature should refine around."""
    if isinstance(sd, StructuredPeakSD):
        width = 2.0 * np.pi * sd.kappa * sd.omega0
        return [max(sd.omega0 - 3 * width, 0.0), sd.omega0, sd.omega0 + 3 * width]
    return []


def _quad_checked(f, a, b, *, lag=None, points=None, weight=None, wvar=None,
                  epsabs=1.49e-12, epsrel=1e-11):
    """scipy.integrate.quad with an error-estimate check."""
    kwargs = dict(epsabs=epsabs, epsrel=epsrel, limit=400)
    if weight is not None:
        kwargs.update(weight=weight, wvar=wvar, limit=800)
    elif points:
        kwargs.update(points=points)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        val, err = quad(f, a, b, **kwargs)
    if err > max(1e-6 * abs(val), 1e3 * epsabs, 1e-10):
        raise QuadratureError(
            f"integral did not converge (estimate {err:.2e} for value {val:.6e})", lag=lag
        )
    return val


def reorganization_energy(sd):
    """lambda = int_0^inf J(w)/w dw, the overall coupling strength."""
    if isinstance(sd, TabulatedSD):
        return _tabulated_reorganization(sd)
    if isinstance(sd, OhmicSD):
        if sd.gamma == 0.0:
            return 0.0
        return _quad_checked(lambda w: sd.gamma / np.pi * np.exp(-w / sd.omega_c),
                             0.0, np.inf, epsabs=1e-300, epsrel=1e-12)
    if isinstance(sd, StructuredPeakSD):
        if sd.alpha == 0.0:
            return 0.0

        def f(w):
            w0 = sd.omega0
            return 2.0 * sd.alpha * w0**4 / ((w0**2 - w**2) ** 2 + (2 * np.pi * sd.kappa * w * w0) ** 2)

        head = _quad_checked(f, 0.0, 20 * sd.omega0, points=_integration_points(sd),
                             epsabs=1e-300, epsrel=1e-12)
        tail = _quad_checked(f, 20 * sd.omega0, np.inf, epsabs=1e-300, epsrel=1e-12)
        return head + tail
    raise TypeError(f"unknown spectral density type {type(sd)!r}")


def _tabulated_reorganization(sd):
    # J piecewise linear: integrate (a + b*w)/w = a*ln(w) + b*w per segment, exactly.
    w, j = sd.omega, sd.j
    if w[0] == 0.0 and j[0] > 0.0:
        raise QuadratureError("tabulated J with J(0) > 0: reorganization integral diverges")
    total = 0.0
    for k in range(len(w) - 1):
        w0, w1, j0, j1 = w[k], w[k + 1], j[k], j[k + 1]
        b = (j1 - j0) / (w1 - w0)
        a = j0 - b * w0
        if w0 == 0.0:
            total += b * (w1 - w0)  # a == 0 here since j0 == 0
        else:
            total += a * np.log(w1 / w0) + b * (w1 - w0)
    return total


def _coth(x):
    with np.errstate(divide="ignore"):
        return 1.0 / np.tanh(x)


def bath_correlation(sd, k_bt, t):
    """C(t) = (1/pi) int_0^inf J(w) [coth(w/2k_BT) cos(wt) - i sin(wt)] dw."""
    if k_bt <= 0:
        raise ValueError("k_bt must be positive (zero-temperature baths are out of scope)")
    if t < 0:
        raise ValueError("bath correlation is computed for t >= 0")
    wmax = omega_cutoff(sd)
    pts = _integration_points(sd)
    if isinstance(sd, TabulatedSD):
        pts = list(sd.omega[1:-1][:40])

    def jre(w):
        if w == 0.0:
            # J ~ c*w near 0 for all supported forms, so J*coth -> 2*k_bt*c
            eps = 1e-9 * max(wmax, 1.0)
            return evaluate_sd(sd, eps) * _coth(eps / (2 * k_bt))
        return evaluate_sd(sd, w) * _coth(w / (2 * k_bt))

    def jim(w):
        return evaluate_sd(sd, w)

    scale = max(abs(jre(wmax * 1e-3)), abs(jre(wmax * 0.1)), 1e-300)
    eabs = 1e-13 * scale * wmax
    if t == 0.0:
        re = _quad_checked(jre, 0.0, wmax, points=pts, epsabs=eabs)
        return complex(re / np.pi, 0.0)
    re = _osc_quad(jre, 0.0, wmax, t, "cos", pts, eabs)
    im = _osc_quad(jim, 0.0, wmax, t, "sin", pts, eabs)
    return complex(re / np.pi, -im / np.pi)


def _osc_quad(f, a, b, freq, kind, points, epsabs):
    """Integrate f(w)*cos(w*freq) or f(w)*sin(w*freq) over [a, b]."""
    if freq * (b - a) < 40.0:
        trig = np.cos if kind == "cos" else np.sin
        return _quad_checked(lambda w: f(w) * trig(w * freq), a, b,
                             points=points, epsabs=epsabs)
    total = 0.0
    cuts = [a] + sorted(p for p in points if a < p < b) + [b]
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        total += _quad_checked(f, lo, hi, weight=kind, wvar=freq, epsabs=epsabs)
    return total


@dataclass(frozen=True, eq=False)
class EtaTable:
    """Discretized influence coefficients on the Trotter grid.

    Coefficients are double time integrals of the bath correlation function
    over step windows [t_k - dt/2, t_k + dt/2], halved at the trajectory
    endpoints. They depend on (i, j) only through the lag d = i - j plus the
    window class of each point:

    - ``mid[d]``: both points interior; ``mid[0]`` is the time-ordered
      self-interaction of one full window.
    - ``onset[d]``: interior point paired with the first point (half window
      [0, dt/2]); ``onset[0]`` is the first-point self-interaction.
    - ``term[d]``: measurement point (half window [t - dt/2, t]) paired with
      an interior point; ``term[0]`` is its self-interaction.
    - ``term_onset[d]``: measurement point paired with the first point.

    Coefficients vanish for lags beyond ``dk_max``.
    """

    dt: float
    dk_max: int
    k_bt: float
    mid: np.ndarray
    onset: np.ndarray
    term: np.ndarray
    term_onset: np.ndarray

    def coefficient(self, i, j, *, terminal_at=None):
        """eta_{ij} with endpoint classes; zero beyond the memory lag."""
        if j > i:
            raise ValueError("coefficients are defined for j <= i")
        d = i - j
        if d > self.dk_max:
            return 0j
        is_term = terminal_at is not None and i == terminal_at and terminal_at > 0
        if i == j:
            if i == 0:
                return complex(self.onset[0])
            return complex(self.term[0]) if is_term else complex(self.mid[0])
        if is_term:
            return complex(self.term_onset[d]) if j == 0 else complex(self.term[d])
        return complex(self.onset[d]) if j == 0 else complex(self.mid[d])


def _pair_eta(sd, k_bt, d_center, half_a, half_b, wmax, pts, eabs, lag):
    """Window-pair coefficient: int_A dt' int_B dt'' C(t' - t'').

    A and B reduce to an omega integral with envelope
    4 sin(w*half_a) sin(w*half_b) / w^2 and oscillation exp(i*w*d_center).
    """

    def env(w):
        if w == 0.0:
            return 4.0 * half_a * half_b
        return 4.0 * np.sin(w * half_a) * np.sin(w * half_b) / w**2

    def fre(w):
        if w == 0.0:
            eps = 1e-9 * max(wmax, 1.0)
            return evaluate_sd(sd, eps) * _coth(eps / (2 * k_bt)) * env(eps)
        return evaluate_sd(sd, w) * _coth(w / (2 * k_bt)) * env(w)

    def fim(w):
        return evaluate_sd(sd, w) * env(w)

    try:
        re = _osc_quad(fre, 0.0, wmax, d_center, "cos", pts, eabs)
        im = _osc_quad(fim, 0.0, wmax, d_center, "sin", pts, eabs)
    except QuadratureError as exc:
        raise QuadratureError(str(exc), lag=lag) from exc
    return complex(re / np.pi, -im / np.pi)


def _diag_eta(sd, k_bt, length, wmax, pts, eabs, lag):
    """Ordered self-interaction of one window of the given length."""

    def fre(w):
        if w == 0.0:
            eps = 1e-9 * max(wmax, 1.0)
            w = eps
        gc = (1.0 - np.cos(w * length)) / w**2
        return evaluate_sd(sd, w) * _coth(w / (2 * k_bt)) * gc

    def fim(w):
        if w == 0.0:
            return 0.0
        gs = length / w - np.sin(w * length) / w**2
        return evaluate_sd(sd, w) * gs

    try:
        re = _quad_checked(fre, 0.0, wmax, points=pts, epsabs=eabs, lag=lag)
        im = _quad_checked(fim, 0.0, wmax, points=pts, epsabs=eabs, lag=lag)
    except QuadratureError as exc:
        raise QuadratureError(str(exc), lag=lag) from exc
    return complex(re / np.pi, -im / np.pi)


def compute_eta_table(sd, k_bt, dt, dk_max, cache_dir=None):
    """Build (or load from the sidecar cache) the influence-coefficient table."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dk_max < 1:
        raise ValueError("dk_max must be at least 1")
    if k_bt <= 0:
        raise ValueError("k_bt must be positive (zero-temperature baths are out of scope)")

    if cache_dir is None:
        cache_dir = os.environ.get("QUAPI_ETA_CACHE")
    cache_path = None
    if cache_dir:
        digest = hashlib.sha256(
            _sd_canonical_bytes(sd) + struct.pack("<ddI", k_bt, dt, dk_max)
        ).hexdigest()[:24]
        cache_path = Path(cache_dir) / f"{digest}.eta"
        if cache_path.is_file():
            table, sd_hash = read_eta_table(cache_path)
            if sd_hash == sd_content_hash(sd):
                return table

    table = _compute_eta_table(sd, k_bt, dt, dk_max)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        write_eta_table(cache_path, table, sd_content_hash(sd))
    return table


def _compute_eta_table(sd, k_bt, dt, dk_max):
    wmax = omega_cutoff(sd)
    pts = _integration_points(sd)
    if isinstance(sd, TabulatedSD):
        pts = list(sd.omega[1:-1][:40])

    n = dk_max + 1
    mid = np.zeros(n, dtype=complex)
    onset = np.zeros(n, dtype=complex)
    term = np.zeros(n, dtype=complex)
    term_onset = np.zeros(n, dtype=complex)

    # absolute tolerance tied to the dominant self-interaction scale
    eabs0 = 1e-300
    mid[0] = _diag_eta(sd, k_bt, dt, wmax, pts, eabs0, lag=0)
    scale = abs(mid[0])
    eabs = max(scale * 1e-13, 1e-300)

    onset[0] = _diag_eta(sd, k_bt, dt / 2, wmax, pts, eabs, lag=0)
    term[0] = _diag_eta(sd, k_bt, dt / 2, wmax, pts, eabs, lag=0)
    term_onset[0] = onset[0]

    h_full, h_half = dt / 2, dt / 4
    for d in range(1, n):
        # window centers: interior at k*dt, onset at dt/4, terminal at t - dt/4
        mid[d] = _pair_eta(sd, k_bt, d * dt, h_full, h_full, wmax, pts, eabs, d)
        onset[d] = _pair_eta(sd, k_bt, d * dt - dt / 4, h_full, h_half, wmax, pts, eabs, d)
        term[d] = _pair_eta(sd, k_bt, d * dt - dt / 4, h_half, h_full, wmax, pts, eabs, d)
        term_onset[d] = _pair_eta(sd, k_bt, d * dt - dt / 2, h_half, h_half, wmax, pts, eabs, d)

    return EtaTable(dt=dt, dk_max=dk_max, k_bt=k_bt, mid=mid, onset=onset,
                    term=term, term_onset=term_onset)


def influence_increment(eta, fwd_coords, bwd_coords, step):
    """Multiplicative influence factor contributed by the newest time point.

    ``fwd_coords``/``bwd_coords`` hold the coupling coordinates of the memory
    window (newest last, including the point at ``step``). Returns

        exp(-(q_i+ - q_i-) * sum_j (eta_ij q_j+ - eta_ij^* q_j-))

    over the in-window lags, with the first-step coefficient class applied
    when the window still contains the trajectory start.
    """
    qf = np.asarray(fwd_coords, dtype=float)
    qb = np.asarray(bwd_coords, dtype=float)
    if qf.shape != qb.shape or qf.ndim != 1 or qf.size == 0:
        raise ValueError("window coordinate arrays must be matching non-empty 1-d arrays")
    n = qf.size
    if n > step + 1 or n > eta.dk_max + 1:
        raise ValueError("window longer than the available history or the memory span")
    lags = np.arange(n - 1, -1, -1)  # lag of each slot, newest last
    coef = np.where(lags == step, eta.onset[lags], eta.mid[lags]).astype(complex)
    if step == 0:
        coef[-1] = eta.onset[0]
    else:
        coef[-1] = eta.mid[0]
    expo = np.sum(coef * qf) - np.sum(np.conj(coef) * qb)
    return complex(np.exp(-(qf[-1] - qb[-1]) * expo))


def eta_coefficient_matrix(eta, n_points, terminal=True):
    """Lower-triangular eta_{ij} matrix for a trajectory of n_points points.

    ``terminal=True`` applies the measurement-step coefficient class to the
    last row; ``terminal=False`` reproduces the classes used while
    propagating (measurement correction not yet applied).
    """
    last = n_points - 1
    mat = np.zeros((n_points, n_points), dtype=complex)
    for i in range(n_points):
        for j in range(0, i + 1):
            mat[i, j] = eta.coefficient(i, j, terminal_at=last if terminal else None)
    return mat


# ---------------------------------------------------------------------------
# sidecar serialization
# ---------------------------------------------------------------------------

def _sd_canonical_bytes(sd):
    if isinstance(sd, OhmicSD):
        return b"ohmic" + struct.pack("<dd", sd.gamma, sd.omega_c)
    if isinstance(sd, StructuredPeakSD):
        return b"structured" + struct.pack("<ddd", sd.alpha, sd.omega0, sd.kappa)
    if isinstance(sd, TabulatedSD):
        return (b"tabulated"
                + np.ascontiguousarray(sd.omega, dtype="<f8").tobytes()
                + np.ascontiguousarray(sd.j, dtype="<f8").tobytes())
    raise TypeError(f"unknown spectral density type {type(sd)!r}")


def sd_content_hash(sd):
    """64-bit content hash of a spectral density."""
    digest = hashlib.sha256(_sd_canonical_bytes(sd)).digest()
    return struct.unpack("<Q", digest[:8])[0]


def eta_table_to_bytes(eta, sd_hash):
    parts = [ETA_MAGIC, struct.pack("<IddQ", eta.dk_max, eta.dt, eta.k_bt, sd_hash)]
    for arr in (eta.mid, eta.onset, eta.term, eta.term_onset):
        parts.append(np.ascontiguousarray(arr, dtype="<c16").tobytes())
    return b"".join(parts)


def eta_table_from_bytes(blob):
    if blob[:4] != ETA_MAGIC:
        raise ValueError("not an eta sidecar (bad magic bytes)")
    dk_max, dt, k_bt, sd_hash = struct.unpack_from("<IddQ", blob, 4)
    off = 4 + struct.calcsize("<IddQ")
    n = dk_max + 1
    arrays = []
    for _ in range(4):
        arr = np.frombuffer(blob, dtype="<c16", count=n, offset=off).astype(complex)
        arrays.append(arr)
        off += 16 * n
    table = EtaTable(dt=dt, dk_max=dk_max, k_bt=k_bt, mid=arrays[0],
                     onset=arrays[1], term=arrays[2], term_onset=arrays[3])
    return table, sd_hash


def write_eta_table(path, eta, sd_hash):
    Path(path).write_bytes(eta_table_to_bytes(eta, sd_hash))


def read_eta_table(path):
    return eta_table_from_bytes(Path(path).read_bytes())
