"""Single-worker propagation loop, density-matrix extraction and observables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .pathstore import (Mask, OmegaStore, filter_store, full_mask, premerge,
                        reduce_mask)

__all__ = [
    "RunSpec",
    "Trajectory",
    "initialize",
    "propagate_step",
    "extract_density_matrix",
    "run",
    "spectrum",
    "expectation",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_telemetry_csv",
    "write_spectrum_csv",
]

MODES = ("premerge", "postmerge_reference", "full_quapi")


@dataclass
class RunSpec:
    """Everything one propagation run needs."""

    system: object
    eta: object
    rho0: np.ndarray
    dt: float
    n_steps: int
    mask: Mask
    theta: float = 0.0
    mode: str = "premerge"
    path_cap: int = 2**32

    def __post_init__(self):
        self.rho0 = np.asarray(self.rho0, dtype=complex)
        m = self.system.m
        if self.rho0.shape != (m, m):
            raise ValueError("rho0 dimension must match the system")
        if abs(np.trace(self.rho0) - 1.0) > 1e-12:
            raise ValueError("rho0 must have unit trace")
        if np.max(np.abs(self.rho0 - self.rho0.conj().T)) > 1e-10:
            raise ValueError("rho0 must be Hermitian")
        if np.linalg.eigvalsh(0.5 * (self.rho0 + self.rho0.conj().T)).min() < -1e-10:
            raise ValueError("rho0 must be positive semidefinite")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.dt <= 0 or self.n_steps < 0:
            raise ValueError("dt must be positive and n_steps non-negative")
        if abs(self.dt - self.eta.dt) > 1e-12 * max(1.0, self.dt):
            raise ValueError("RunSpec dt must match the eta table dt")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if max(self.mask.lags) > self.eta.dk_max:
            raise ValueError("mask lags must not exceed the eta memory span")

    @property
    def dk_max(self):
        return self.eta.dk_max

    def effective_mask(self):
        if self.mode == "full_quapi":
            return full_mask(self.dk_max)
        return self.mask

    def effective_theta(self):
        return 0.0 if self.mode == "full_quapi" else self.theta


@dataclass
class Trajectory:
    times: np.ndarray
    rho: np.ndarray
    trace_drift: np.ndarray
    path_counts: np.ndarray
    discarded: np.ndarray = field(default=None)


def initialize(spec):
    """Length-1 store: one configuration per nonzero rho0 entry, weighted by
    the first-step self influence factor."""
    rho0 = spec.rho0
    m = spec.system.m
    if not np.any(rho0 != 0):
        raise ValueError("rho0 is identically zero")
    a_idx, b_idx = np.nonzero(rho0)
    q = spec.system.q
    eta00 = complex(spec.eta.onset[0])
    qa, qb = q[a_idx], q[b_idx]
    factor = np.exp(-(qa - qb) * (eta00 * qa - np.conj(eta00) * qb))
    amps = rho0[a_idx, b_idx] * factor
    dtype = np.uint8 if m <= 256 else np.uint16
    store = OmegaStore(a_idx.astype(dtype)[:, None], b_idx.astype(dtype)[:, None],
                       amps.copy(), amps.copy(), m, t=0)
    return store


def _row_coefficients(eta, kept_len, t):
    """Influence coefficients coupling the new point at step t to each kept
    window slot (slot order, oldest first). Slot s sits at lag kept_len - s."""
    lags = np.arange(kept_len, 0, -1)
    coef = eta.mid[lags].astype(complex)
    onset_hits = lags == t
    if np.any(onset_hits):
        coef[onset_hits] = eta.onset[lags[onset_hits]]
    return coef


def _branch(store, spec, t):
    """Extend every configuration by all M^2 endpoint pairs.

    amplitude factor = U_fwd[a, s+] * U_bwd[s-, b] * influence increment of
    row t. The representative weight and the accumulated sum are both
    propagated by the same factor.
    """
    eta = spec.eta
    sysm = spec.system
    m = sysm.m
    q = sysm.q
    n = len(store)
    L = store.window_len
    drop = 1 if L == eta.dk_max + 1 else 0
    kept_f = store.fwd[:, drop:]
    kept_b = store.bwd[:, drop:]
    kept_len = L - drop

    coef = _row_coefficients(eta, kept_len, t)
    dot = q[kept_f] @ coef - q[kept_b] @ np.conj(coef)
    mid0 = complex(eta.mid[0])

    last_f = store.fwd[:, -1].astype(np.intp)
    last_b = store.bwd[:, -1].astype(np.intp)

    new_len = kept_len + 1
    total = n * m * m
    fwd = np.empty((total, new_len), dtype=store.fwd.dtype)
    bwd = np.empty((total, new_len), dtype=store.bwd.dtype)
    weight = np.empty(total, dtype=complex)
    amp = np.empty(total, dtype=complex)

    u_f = sysm.u_fwd
    u_b = sysm.u_bwd
    for a in range(m):
        uf_a = u_f[a, :][last_f]
        for b in range(m):
            blk = slice((a * m + b) * n, (a * m + b + 1) * n)
            fwd[blk, :kept_len] = kept_f
            fwd[blk, kept_len] = a
            bwd[blk, :kept_len] = kept_b
            bwd[blk, kept_len] = b
            dq = q[a] - q[b]
            if dq == 0.0:
                incr = 1.0
            else:
                incr = np.exp(-dq * (dot + mid0 * q[a] - np.conj(mid0) * q[b]))
            factor = uf_a * u_b[:, b][last_b] * incr
            weight[blk] = store.weight * factor
            amp[blk] = store.sum * factor
    return OmegaStore(fwd, bwd, weight, amp, m, t=t)


def propagate_step(store, spec, t):
    """One time step t-1 -> t in the mode requested by the spec.

    premerge / full_quapi: group on the shifted (reduced) mask first, then
    branch; the result is unique on the propagation mask by construction.
    postmerge_reference: branch every configuration, then group on the
    propagation mask (the transient store is M^2 times larger).
    """
    if store.t is not None and store.t != t - 1:
        raise ValueError(f"store holds step {store.t}, expected {t - 1}")
    mask = spec.effective_mask()
    if spec.mode in ("premerge", "full_quapi"):
        grouped = premerge(store, reduce_mask(mask))
        grouped.t = store.t
        return _branch(grouped, spec, t)
    branched = _branch(store, spec, t)
    merged = premerge(branched, mask)
    merged.keys = None  # back to the sequential phase between steps
    return merged


def _terminal_delta(eta, kept_len, t):
    """Measurement-minus-interior coefficient difference for each kept slot."""
    lags = np.arange(kept_len, 0, -1)
    delta = (eta.term[lags] - eta.mid[lags]).astype(complex)
    onset_hits = lags == t
    if np.any(onset_hits):
        delta[onset_hits] = (eta.term_onset[lags[onset_hits]]
                             - eta.onset[lags[onset_hits]])
    return delta


def _fused_step(store, spec, t, group_method):
    """premerge + branch + extract + filter without materializing the
    pruned children: identical results to the compositional path, streamed
    one endpoint block at a time."""
    eta = spec.eta
    sysm = spec.system
    m, q = sysm.m, sysm.q
    theta = spec.effective_theta()

    grouped = premerge(store, reduce_mask(spec.effective_mask()), method=group_method)
    n = len(grouped)
    L = grouped.window_len
    drop = 1 if L == eta.dk_max + 1 else 0
    kept_f = grouped.fwd[:, drop:]
    kept_b = grouped.bwd[:, drop:]
    kept_len = L - drop

    coef = _row_coefficients(eta, kept_len, t)
    dot = q[kept_f] @ coef - q[kept_b] @ np.conj(coef)
    delta = _terminal_delta(eta, kept_len, t)
    dot_term = q[kept_f] @ delta - q[kept_b] @ np.conj(delta)
    mid0 = complex(eta.mid[0])
    d0 = complex(eta.term[0] - eta.mid[0])

    last_f = grouped.fwd[:, -1].astype(np.intp)
    last_b = grouped.bwd[:, -1].astype(np.intp)
    u_f, u_b = sysm.u_fwd, sysm.u_bwd

    rho = np.zeros((m, m), dtype=complex)
    block_sums = []
    block_weights = []
    transient = 0
    gmax = 0.0
    for a in range(m):
        uf_a = u_f[a, :][last_f]
        for b in range(m):
            dq = q[a] - q[b]
            if dq == 0.0:
                incr = 1.0
                corr = None
            else:
                incr = np.exp(-dq * (dot + mid0 * q[a] - np.conj(mid0) * q[b]))
                corr = np.exp(-dq * (dot_term + d0 * q[a] - np.conj(d0) * q[b]))
            factor = uf_a * u_b[:, b][last_b] * incr
            sums = grouped.sum * factor
            block_sums.append(sums)
            block_weights.append(grouped.weight * factor)
            rho[a, b] = np.sum(sums * corr) if corr is not None else np.sum(sums)
            transient += n
            if n:
                gmax = max(gmax, float(np.abs(sums).max()))

    cut = theta * gmax
    new_len = kept_len + 1
    parts_f, parts_b, parts_w, parts_s = [], [], [], []
    discarded = 0j
    for a in range(m):
        for b in range(m):
            sums = block_sums[a * m + b]
            if theta > 0.0:
                keep = np.abs(sums) >= cut
                discarded += sums[~keep].sum()
                idx = np.flatnonzero(keep)
            else:
                idx = slice(None)
            nf = np.empty((sums[idx].shape[0], new_len), dtype=grouped.fwd.dtype)
            nb = np.empty_like(nf)
            nf[:, :kept_len] = kept_f[idx]
            nf[:, kept_len] = a
            nb[:, :kept_len] = kept_b[idx]
            nb[:, kept_len] = b
            parts_f.append(nf)
            parts_b.append(nb)
            parts_w.append(block_weights[a * m + b][idx])
            parts_s.append(sums[idx])
    out = OmegaStore(np.concatenate(parts_f), np.concatenate(parts_b),
                     np.concatenate(parts_w), np.concatenate(parts_s),
                     m, t=t)
    return out, rho, complex(discarded), transient


def _terminal_corrections(store, spec, t):
    """Per-configuration factor converting stored amplitudes to measured ones.

    Stored rows use interior-window coefficients for the newest point; the
    measurement step uses the half terminal window. Any earlier measurement
    correction has not been baked in, so one factor per configuration fixes
    the newest row only.
    """
    if t == 0:
        return np.ones(len(store))
    eta = spec.eta
    q = spec.system.q
    L = store.window_len
    lags = np.arange(L - 1, 0, -1)
    delta = (eta.term[lags] - eta.mid[lags]).astype(complex)
    onset_hits = lags == t
    if np.any(onset_hits):
        delta[onset_hits] = (eta.term_onset[lags[onset_hits]]
                             - eta.onset[lags[onset_hits]])
    d0 = complex(eta.term[0] - eta.mid[0])
    dot = q[store.fwd[:, :-1]] @ delta - q[store.bwd[:, :-1]] @ np.conj(delta)
    qa = q[store.fwd[:, -1].astype(np.intp)]
    qb = q[store.bwd[:, -1].astype(np.intp)]
    return np.exp(-(qa - qb) * (dot + d0 * qa - np.conj(d0) * qb))


def extract_density_matrix(store, spec, t=None):
    """rho[a, b] = sum of corrected amplitudes over configurations whose
    newest slot is (a, b)."""
    if t is None:
        t = store.t if store.t is not None else 0
    m = spec.system.m
    corr = _terminal_corrections(store, spec, t)
    vals = store.sum * corr
    idx = store.fwd[:, -1].astype(np.intp) * m + store.bwd[:, -1].astype(np.intp)
    re = np.bincount(idx, weights=vals.real, minlength=m * m)
    im = np.bincount(idx, weights=vals.imag, minlength=m * m)
    return (re + 1j * im).reshape(m, m)


def run(spec):
    """Iterate the propagation loop and record the trajectory plus telemetry."""
    n = spec.n_steps
    m = spec.system.m
    times = np.arange(n + 1) * spec.dt
    rho = np.zeros((n + 1, m, m), dtype=complex)
    drift = np.zeros(n + 1)
    counts = np.zeros(n + 1, dtype=np.int64)
    discarded = np.zeros(n + 1, dtype=complex)

    store = initialize(spec)
    rho[0] = spec.rho0
    counts[0] = len(store)
    theta = spec.effective_theta()
    mask = spec.effective_mask()
    # run() keeps its stores ordered by the window pair sequence, so an
    # uncoarsened mask allows the sort-free group-reduce
    fused = spec.mode in ("premerge", "full_quapi")
    method = ("presorted" if mask.lags == tuple(range(spec.dk_max + 1))
              else "vectorized")

    for t in range(1, n + 1):
        if fused:
            store, rho_t, disc, transient = _fused_step(store, spec, t, method)
            rho[t] = rho_t
            if transient > spec.path_cap:
                raise RuntimeError(
                    f"live configuration count {transient} exceeds the cap {spec.path_cap}")
        else:
            store = propagate_step(store, spec, t)
            if len(store) > spec.path_cap:
                raise RuntimeError(
                    f"live configuration count {len(store)} exceeds the cap {spec.path_cap}")
            rho[t] = extract_density_matrix(store, spec, t)
            store, disc = filter_store(store, theta)
        drift[t] = 1.0 - abs(np.trace(rho[t]))
        counts[t] = len(store)
        discarded[t] = disc
    return Trajectory(times=times, rho=rho, trace_drift=drift,
                      path_counts=counts, discarded=discarded)


def expectation(trajectory, operator):
    """Real expectation value series tr(rho(t) O)."""
    op = np.asarray(operator, dtype=complex)
    return np.real(np.einsum("tab,ba->t", trajectory.rho, op))


def spectrum(p, dt):
    """One-sided spectrum S(w) = Re{DFT[P]} / (2 pi N_t) on the DFT grid."""
    p = np.asarray(p, dtype=float)
    n = p.size
    if n < 2:
        raise ValueError("need at least two samples")
    s = np.real(np.fft.fft(p)) / (2.0 * np.pi * n)
    omega = 2.0 * np.pi * np.arange(n) / (n * dt)
    half = n // 2 + 1
    return omega[:half], s[:half]


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def _trajectory_header(m):
    cols = ["t"]
    for a in range(m):
        for b in range(m):
            cols.append(f"re_rho_{a}{b}")
            cols.append(f"im_rho_{a}{b}")
    cols += ["trace_drift", "n_paths"]
    return cols


def write_trajectory_csv(trajectory, fileobj):
    m = trajectory.rho.shape[1]
    writer = csv.writer(fileobj)
    writer.writerow(_trajectory_header(m))
    for k, t in enumerate(trajectory.times):
        row = [f"{t:.12g}"]
        for a in range(m):
            for b in range(m):
                row.append(f"{trajectory.rho[k, a, b].real:.17g}")
                row.append(f"{trajectory.rho[k, a, b].imag:.17g}")
        row.append(f"{trajectory.trace_drift[k]:.17g}")
        row.append(str(int(trajectory.path_counts[k])))
        writer.writerow(row)


def read_trajectory_csv(fileobj):
    reader = csv.reader(fileobj)
    header = next(reader)
    m2 = (len(header) - 3) // 2
    m = int(round(np.sqrt(m2)))
    times, rhos, drifts, counts = [], [], [], []
    for row in reader:
        times.append(float(row[0]))
        vals = np.array([float(x) for x in row[1:1 + 2 * m2]])
        rhos.append((vals[0::2] + 1j * vals[1::2]).reshape(m, m))
        drifts.append(float(row[-2]))
        counts.append(int(row[-1]))
    return Trajectory(times=np.array(times), rho=np.array(rhos),
                      trace_drift=np.array(drifts),
                      path_counts=np.array(counts, dtype=np.int64))


def write_telemetry_csv(trajectory, fileobj):
    writer = csv.writer(fileobj)
    writer.writerow(["t", "n_paths", "trace_drift", "re_discarded", "im_discarded"])
    disc = trajectory.discarded
    if disc is None:
        disc = np.zeros(len(trajectory.times), dtype=complex)
    for k, t in enumerate(trajectory.times):
        writer.writerow([f"{t:.12g}", str(int(trajectory.path_counts[k])),
                         f"{trajectory.trace_drift[k]:.17g}",
                         f"{disc[k].real:.17g}", f"{disc[k].imag:.17g}"])


def write_spectrum_csv(omega, s, fileobj):
    writer = csv.writer(fileobj)
    writer.writerow(["omega", "S"])
    for w, v in zip(omega, s):
        writer.writerow([f"{w:.17g}", f"{v:.17g}"])
