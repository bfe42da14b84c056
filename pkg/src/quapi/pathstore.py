"""Path configurations, masked keys and the group-reduce (merging) machinery.

The propagator tensor is held column-wise: integer window matrices for the
forward/backward paths (newest point last), a representative amplitude per
configuration (``weight``) and the accumulated amplitude of everything merged
into it (``sum``). A store is in the *sequential* phase between steps and in
the *associative* phase (unique masked keys attached, key-sorted) after a
merge; exactly one of the two views is active at rest.
"""

from __future__ import annotations

import sys
import threading
from dataclasses import dataclass

import numpy as np

_LITTLE_ENDIAN = sys.byteorder == "little"

__all__ = [
    "Configuration",
    "Mask",
    "OmegaStore",
    "full_mask",
    "dense_mask",
    "reduce_mask",
    "masked_key",
    "key_matrix",
    "premerge",
    "filter_store",
    "concat_stores",
]


@dataclass
class Configuration:
    """One forward/backward path window with its representative and merged amplitude."""

    fwd: np.ndarray
    bwd: np.ndarray
    weight: complex
    sum: complex

    def __post_init__(self):
        self.fwd = np.asarray(self.fwd)
        self.bwd = np.asarray(self.bwd)
        if self.fwd.shape != self.bwd.shape or self.fwd.ndim != 1 or self.fwd.size == 0:
            raise ValueError("fwd and bwd must be matching non-empty 1-d index arrays")


class Mask:
    """Sorted distinct memory lags used for path comparison; lag 0 is mandatory
    for a propagation mask (the current point is always resolved)."""

    __slots__ = ("lags",)

    def __init__(self, lags, require_zero=True):
        lags = tuple(sorted(int(l) for l in lags))
        if len(set(lags)) != len(lags):
            raise ValueError("mask lags must be distinct")
        if lags and lags[0] < 0:
            raise ValueError("mask lags must be non-negative")
        if require_zero and (not lags or lags[0] != 0):
            raise ValueError("a propagation mask must contain lag 0")
        self.lags = lags

    @property
    def size(self):
        return len(self.lags)

    def __iter__(self):
        return iter(self.lags)

    def __contains__(self, lag):
        return lag in self.lags

    def __eq__(self, other):
        return isinstance(other, Mask) and self.lags == other.lags

    def __hash__(self):
        return hash(self.lags)

    def __repr__(self):
        return f"Mask({list(self.lags)})"


def full_mask(dk_max):
    """Every lag of the memory window: no coarse graining."""
    return Mask(range(dk_max + 1))


def dense_mask(dk_eff, dk_max):
    """Heuristic mask: lag 0, the dk_eff//2 smallest lags, remainder spread
    evenly up to dk_max (stand-in for an externally optimized mask)."""
    if not 1 <= dk_eff <= dk_max + 1:
        raise ValueError("mask size must lie in [1, dk_max + 1]")
    m = dk_eff // 2
    lags = list(range(m + 1))
    rest = dk_eff - 1 - m
    for i in range(1, rest + 1):
        lags.append(m + (2 * i * (dk_max - m) + rest) // (2 * rest))
    return Mask(lags[:dk_eff])


def reduce_mask(mask):
    """Pre-merge mask: original lags shifted one step into the past.

    Grouping by it at time t-1 reproduces, after propagation, the grouping by
    the original mask at time t restricted to the pre-existing slots.
    """
    if 0 not in mask:
        raise ValueError("reduce_mask needs a propagation mask containing lag 0")
    return Mask((l - 1 for l in mask.lags if l >= 1), require_zero=False)


def _pair_bytes(n_states):
    return 1 if n_states * n_states <= 256 else 2


def weight_rank(w):
    """Squared magnitude used for every representative comparison.

    Written as re*re + im*im so the scalar and vectorized code paths round
    identically (library |z| implementations may differ in the last ulp,
    which would make representative selection schedule-dependent).
    """
    return w.real * w.real + w.imag * w.imag


class OmegaStore:
    """Columnar container of configurations (one row per configuration)."""

    __slots__ = ("fwd", "bwd", "weight", "sum", "keys", "t", "n_states")

    def __init__(self, fwd, bwd, weight, sum, n_states, keys=None, t=None):
        self.fwd = np.asarray(fwd)
        self.bwd = np.asarray(bwd)
        self.weight = np.asarray(weight, dtype=complex)
        self.sum = np.asarray(sum, dtype=complex)
        self.keys = keys
        self.t = t
        self.n_states = int(n_states)
        if self.fwd.shape != self.bwd.shape or self.fwd.ndim != 2:
            raise ValueError("fwd and bwd must be matching (n, window) index matrices")
        if len(self.weight) != len(self.fwd) or len(self.sum) != len(self.fwd):
            raise ValueError("amplitude arrays must match the number of configurations")

    @property
    def phase(self):
        return "map" if self.keys is not None else "seq"

    @property
    def window_len(self):
        return self.fwd.shape[1]

    def __len__(self):
        return self.fwd.shape[0]

    def configurations(self):
        for i in range(len(self)):
            yield Configuration(self.fwd[i].copy(), self.bwd[i].copy(),
                                complex(self.weight[i]), complex(self.sum[i]))

    @classmethod
    def from_configurations(cls, configs, n_states, t=None):
        configs = list(configs)
        if not configs:
            raise ValueError("cannot build a store from zero configurations")
        length = configs[0].fwd.size
        if any(c.fwd.size != length for c in configs):
            raise ValueError("all configurations must share one window length")
        dtype = np.uint8 if n_states <= 256 else np.uint16
        fwd = np.array([c.fwd for c in configs], dtype=dtype)
        bwd = np.array([c.bwd for c in configs], dtype=dtype)
        w = np.array([c.weight for c in configs], dtype=complex)
        s = np.array([c.sum for c in configs], dtype=complex)
        return cls(fwd, bwd, w, s, n_states, t=t)

    def select(self, idx):
        keys = self.keys[idx] if self.keys is not None else None
        return OmegaStore(self.fwd[idx], self.bwd[idx], self.weight[idx],
                          self.sum[idx], self.n_states, keys=keys, t=self.t)

    def to_dict(self):
        """Associative view: masked key -> Configuration (map phase only)."""
        if self.keys is None:
            raise ValueError("store is in the sequential phase; merge it first")
        return {self.keys[i].tobytes(): cfg
                for i, cfg in enumerate(self.configurations())}

    def dump_csv(self, fileobj):
        """Debug dump: key_hex,fwd,bwd,re_weight,im_weight,re_sum,im_sum."""
        if self.keys is not None:
            key_hex = [self.keys[i].tobytes().hex() for i in range(len(self))]
        else:
            km = key_matrix(self, full_mask(self.window_len - 1))
            key_hex = [km[i].tobytes().hex() for i in range(len(self))]
        fileobj.write("key_hex,fwd,bwd,re_weight,im_weight,re_sum,im_sum\n")
        for i in range(len(self)):
            fwd = ";".join(str(x) for x in self.fwd[i])
            bwd = ";".join(str(x) for x in self.bwd[i])
            fileobj.write(f"{key_hex[i]},{fwd},{bwd},"
                          f"{self.weight[i].real:.17g},{self.weight[i].imag:.17g},"
                          f"{self.sum[i].real:.17g},{self.sum[i].imag:.17g}\n")


def concat_stores(stores):
    stores = [s for s in stores if len(s)]
    if not stores:
        raise ValueError("nothing to concatenate")
    n_states = stores[0].n_states
    keys = None
    if all(s.keys is not None for s in stores):
        keys = np.concatenate([s.keys for s in stores], axis=0)
    return OmegaStore(np.concatenate([s.fwd for s in stores], axis=0),
                      np.concatenate([s.bwd for s in stores], axis=0),
                      np.concatenate([s.weight for s in stores]),
                      np.concatenate([s.sum for s in stores]),
                      n_states, keys=keys, t=stores[0].t)


# ---------------------------------------------------------------------------
# masked keys
# ---------------------------------------------------------------------------

def _mask_columns(mask, window_len):
    """Window columns selected by the mask, most recent first.

    Lags beyond the window are dropped, so short early-time windows are keyed
    on the available lags only.
    """
    return [window_len - 1 - lag for lag in mask.lags if lag < window_len]


def key_matrix(store, mask):
    """(n, key_bytes) uint8 matrix of masked keys for all configurations."""
    cols = _mask_columns(mask, store.window_len)
    n = len(store)
    m = store.n_states
    if not cols:
        return np.zeros((n, 1), dtype=np.uint8)
    pairs = (store.fwd[:, cols].astype(np.uint32) * m
             + store.bwd[:, cols].astype(np.uint32))
    if _pair_bytes(m) == 1:
        return pairs.astype(np.uint8)
    out = np.empty((n, 2 * len(cols)), dtype=np.uint8)
    out[:, 0::2] = pairs & 0xFF
    out[:, 1::2] = pairs >> 8
    return out


def masked_key(config, mask, n_states):
    """Packed byte-string key of one configuration on the mask."""
    fwd = np.asarray(config.fwd)
    cols = _mask_columns(mask, fwd.size)
    if not cols:
        return b"\x00"
    pairs = fwd[cols].astype(np.uint32) * n_states + np.asarray(config.bwd)[cols].astype(np.uint32)
    if _pair_bytes(n_states) == 1:
        return pairs.astype(np.uint8).tobytes()
    out = np.empty(2 * len(cols), dtype=np.uint8)
    out[0::2] = pairs & 0xFF
    out[1::2] = pairs >> 8
    return out.tobytes()


def _pack_u64_cols(byte_mat):
    """Pack key bytes into uint64 columns whose integer order equals
    lexicographic byte order."""
    n, k = byte_mat.shape
    ncols = (k + 7) // 8
    padded = np.zeros((n, 8 * ncols), dtype=np.uint8)
    padded[:, :k] = byte_mat
    cols = padded.view(np.uint64)
    if _LITTLE_ENDIAN:
        cols = cols.byteswap()
    return cols


def _path_byte_matrix(store):
    """Full-path bytes (fwd then bwd, stored slot order) for lexicographic ties."""
    if store.fwd.dtype == np.uint8:
        return np.concatenate([store.fwd, store.bwd], axis=1)
    n, L = store.fwd.shape
    out = np.empty((n, 4 * L), dtype=np.uint8)
    out[:, 0:2 * L:2] = store.fwd >> 8
    out[:, 1:2 * L:2] = store.fwd & 0xFF
    out[:, 2 * L::2] = store.bwd >> 8
    out[:, 2 * L + 1::2] = store.bwd & 0xFF
    return out


def premerge(store, mask, method="vectorized", n_chunks=4):
    """Group configurations by masked key; keep the largest-|weight| path as
    representative and accumulate all sums.

    Returns a key-sorted store in the associative phase with one entry per
    distinct key. Ties at equal |weight| go to the lexicographically smaller
    full path (fwd then bwd).
    """
    if method == "vectorized":
        return _premerge_vectorized(store, mask)
    if method == "sequential":
        return _premerge_sequential(store, mask)
    if method == "parallel":
        return _premerge_parallel(store, mask, n_chunks)
    if method == "presorted":
        return _group_reduce_presorted(store, mask)
    raise ValueError(f"unknown premerge method {method!r}")


def _group_reduce_presorted(store, mask):
    """Group-reduce for stores already sorted by the masked key.

    The propagation loop emits configurations ordered lexicographically by
    the window pair sequence (newest first); with an uncoarsened mask the
    next merge key is a prefix of that sequence, so groups are consecutive
    runs and no sort is needed.
    """
    n = len(store)
    kb = key_matrix(store, mask)
    if n == 0:
        return _table_to_store(store, kb, {})
    boundary = np.ones(n, dtype=bool)
    boundary[1:] = np.any(kb[1:] != kb[:-1], axis=1)
    starts = np.flatnonzero(boundary)
    gsum = np.add.reduceat(store.sum, starts)

    negw = -weight_rank(store.weight)
    gmin = np.minimum.reduceat(negw, starts)
    group_ids = np.cumsum(boundary) - 1
    is_min = negw == gmin[group_ids]
    n_min = np.add.reduceat(is_min.astype(np.int64), starts)
    min_pos = np.flatnonzero(is_min)
    _, first_of_group = np.unique(group_ids[min_pos], return_index=True)
    rep_idx = min_pos[first_of_group]

    ties = np.flatnonzero(n_min > 1)
    if len(ties):
        paths = _path_byte_matrix(store)
        ends = np.append(starts[1:], n)
        for g in ties:
            cand = [i for i in range(starts[g], ends[g]) if is_min[i]]
            rep_idx[g] = min(cand, key=lambda i: (paths[i].tobytes(), i))

    out = store.select(rep_idx)
    out.sum = gsum
    out.keys = kb[rep_idx]
    return out


def _premerge_vectorized(store, mask):
    kb = key_matrix(store, mask)
    cols = _pack_u64_cols(kb)
    key_order = tuple(cols[:, j] for j in range(cols.shape[1] - 1, -1, -1))

    # one combined sort: key, then |weight| descending, then path ascending,
    # so the first row of each key block is the representative
    path_cols = _pack_u64_cols(_path_byte_matrix(store))
    sort_keys = (tuple(path_cols[:, j] for j in range(path_cols.shape[1] - 1, -1, -1))
                 + (-weight_rank(store.weight),) + key_order)
    order = np.lexsort(sort_keys)
    sorted_cols = cols[order]
    boundary = np.ones(len(store), dtype=bool)
    if len(store) > 1:
        boundary[1:] = np.any(sorted_cols[1:] != sorted_cols[:-1], axis=1)
    starts = np.flatnonzero(boundary)
    gsum = np.add.reduceat(store.sum[order], starts) if len(store) else store.sum[:0]
    rep_idx = order[starts]

    out = store.select(rep_idx)
    out.sum = gsum
    out.keys = kb[rep_idx]
    return out


def _merge_into(table, key, weight, path_bytes, sum_value, source):
    """Insert-or-update one entry of the associative table.

    table[key] = [weight, path_bytes, accumulated_sum, source_index]
    """
    entry = table.get(key)
    if entry is None:
        table[key] = [weight, path_bytes, sum_value, source]
        return
    entry[2] = entry[2] + sum_value
    # schedule-independent ordering: |weight| desc, then path, then source
    if (-weight_rank(weight), path_bytes, source) < (-weight_rank(entry[0]), entry[1], entry[3]):
        entry[0] = weight
        entry[1] = path_bytes
        entry[3] = source


def _premerge_sequential(store, mask):
    kb = key_matrix(store, mask)
    paths = _path_byte_matrix(store)
    table = {}
    for i in range(len(store)):
        _merge_into(table, kb[i].tobytes(), complex(store.weight[i]),
                    paths[i].tobytes(), complex(store.sum[i]), i)
    return _table_to_store(store, kb, table)


def _table_to_store(store, kb, table):
    keys_sorted = sorted(table)
    idx = np.array([table[k][3] for k in keys_sorted], dtype=np.intp)
    out = store.select(idx)
    out.sum = np.array([table[k][2] for k in keys_sorted], dtype=complex)
    out.keys = kb[idx] if len(idx) else np.zeros((0, kb.shape[1]), dtype=np.uint8)
    return out


def _premerge_parallel(store, mask, n_chunks):
    """Work-sharing premerge: chunked insert-or-update into one shared table.

    Keys and representatives are schedule-independent; sums may differ from
    the sequential result only by floating accumulation order.
    """
    kb = key_matrix(store, mask)
    paths = _path_byte_matrix(store)
    n = len(store)
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    table = {}
    lock = threading.Lock()

    def work(lo, hi):
        local = {}
        for i in range(lo, hi):
            _merge_into(local, kb[i].tobytes(), complex(store.weight[i]),
                        paths[i].tobytes(), complex(store.sum[i]), i)
        with lock:
            for key, entry in local.items():
                _merge_into(table, key, entry[0], entry[1], entry[2], entry[3])

    threads = [threading.Thread(target=work, args=(lo, hi))
               for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    return _table_to_store(store, kb, table)


def filter_store(store, theta):
    """Drop configurations with |sum| < theta * max|sum|.

    Returns the filtered store and the discarded complex total (for
    normalization-drift accounting).
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    if len(store) == 0 or theta == 0.0:
        return store, 0j
    mags = np.abs(store.sum)
    keep = mags >= theta * mags.max()
    discarded = complex(store.sum[~keep].sum())
    return store.select(np.flatnonzero(keep)), discarded
