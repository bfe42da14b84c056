"""Multi-worker execution: partitioning, inter-worker merging, load balancing.

Workers own disjoint slices of the propagator tensor and communicate only by
messages. The merge round runs a sequential sender loop: each worker in rank
order broadcasts its original local chunk; receivers that have not yet been
sender absorb matching keys into an auxiliary accumulator, receivers that
already were sender drop matching keys (their content is provably already
absorbed downstream). After broadcasting, a sender folds its accumulator into
its local store. Every masked key therefore ends up on exactly one worker
(the highest-ranked original holder) carrying the exact global sum and the
globally largest-|weight| representative.
"""

from __future__ import annotations

import multiprocessing as mp
import queue
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import engine as _engine
from .pathstore import (OmegaStore, filter_store, premerge, reduce_mask,
                        weight_rank)

__all__ = [
    "RouteMap",
    "partition",
    "inter_worker_merge",
    "balance_load",
    "build_route_map",
    "reduce_density",
    "serialize_merge_message",
    "deserialize_merge_message",
    "run_distributed",
]


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIHH")  # payload bytes, n_entries, key_len, window_len


def serialize_merge_message(store):
    """Length-prefixed little-endian batch of (key, fwd, bwd, weight, sum)."""
    if store.keys is None:
        raise ValueError("merge messages carry masked keys; merge the store first")
    n = len(store)
    key_len = store.keys.shape[1] if n else 1
    window = store.window_len if n else 1
    body = b""
    if n:
        keys = np.ascontiguousarray(store.keys, dtype=np.uint8)
        fwd = np.ascontiguousarray(store.fwd, dtype="<u2")
        bwd = np.ascontiguousarray(store.bwd, dtype="<u2")
        amps = np.empty((n, 4), dtype="<f8")
        amps[:, 0] = store.weight.real
        amps[:, 1] = store.weight.imag
        amps[:, 2] = store.sum.real
        amps[:, 3] = store.sum.imag
        chunks = []
        for i in range(n):
            chunks.append(keys[i].tobytes())
            chunks.append(fwd[i].tobytes())
            chunks.append(bwd[i].tobytes())
            chunks.append(amps[i].tobytes())
        body = b"".join(chunks)
    return _HEADER.pack(len(body), n, key_len, window) + body


def deserialize_merge_message(blob, n_states, t=None):
    size, n, key_len, window = _HEADER.unpack_from(blob, 0)
    if len(blob) != _HEADER.size + size:
        raise ValueError("merge message length prefix does not match payload")
    entry = key_len + 2 * window + 2 * window + 32
    keys = np.zeros((n, key_len), dtype=np.uint8)
    dtype = np.uint8 if n_states <= 256 else np.uint16
    fwd = np.zeros((n, window), dtype=dtype)
    bwd = np.zeros((n, window), dtype=dtype)
    weight = np.zeros(n, dtype=complex)
    amps = np.zeros(n, dtype=complex)
    off = _HEADER.size
    for i in range(n):
        rec = blob[off:off + entry]
        keys[i] = np.frombuffer(rec, dtype=np.uint8, count=key_len)
        fwd[i] = np.frombuffer(rec, dtype="<u2", count=window, offset=key_len)
        bwd[i] = np.frombuffer(rec, dtype="<u2", count=window, offset=key_len + 2 * window)
        re_w, im_w, re_s, im_s = struct.unpack_from("<dddd", rec, key_len + 4 * window)
        weight[i] = complex(re_w, im_w)
        amps[i] = complex(re_s, im_s)
        off += entry
    return OmegaStore(fwd, bwd, weight, amps, n_states, keys=keys, t=t)


# ---------------------------------------------------------------------------
# pure protocol pieces (shared by the in-memory reference and the runners)
# ---------------------------------------------------------------------------

def _store_to_table(store, rank):
    """key -> [weight, path_bytes, sum, (rank, row)] for protocol bookkeeping."""
    from .pathstore import _path_byte_matrix

    table = {}
    if len(store):
        paths = _path_byte_matrix(store)
        for i in range(len(store)):
            table[store.keys[i].tobytes()] = [complex(store.weight[i]),
                                              paths[i].tobytes(),
                                              complex(store.sum[i]), (rank, i)]
    return table


def _absorb_into_aux(local, aux, remote, sender_rank):
    """Rank > sender: accumulate matching remote entries into the auxiliary
    store without touching the still-to-be-broadcast local one."""
    from .pathstore import _path_byte_matrix

    paths = _path_byte_matrix(remote) if len(remote) else None
    for i in range(len(remote)):
        key = remote.keys[i].tobytes()
        if key not in local:
            continue
        cand = [complex(remote.weight[i]), paths[i].tobytes(),
                complex(remote.sum[i]), (sender_rank, i)]
        held = aux.get(key)
        if held is None:
            aux[key] = cand
        else:
            held[2] = held[2] + cand[2]
            if (-weight_rank(cand[0]), cand[1], cand[3]) < (-weight_rank(held[0]), held[1], held[3]):
                held[0], held[1], held[3] = cand[0], cand[1], cand[3]


def _drop_matches(loc_star, remote_keys):
    """Rank < sender: a higher-ranked holder owns these keys; the local copy
    (original sum plus anything folded from lower ranks) is already absorbed
    on the sender side, so it is simply removed."""
    for key in remote_keys:
        loc_star.pop(key, None)


def _fold_aux(local, aux):
    """Sender after broadcasting: merge the accumulator into the local store."""
    for key, cand in aux.items():
        held = local[key]
        held[2] = held[2] + cand[2]
        if (-weight_rank(cand[0]), cand[1], cand[3]) < (-weight_rank(held[0]), held[1], held[3]):
            held[0], held[1], held[3] = cand[0], cand[1], cand[3]
    aux.clear()


def _table_to_maps(table, template, rank_stores):
    """Rebuild an OmegaStore (key-sorted) from a protocol table."""
    n_states = template.n_states
    keys_sorted = sorted(table)
    if not keys_sorted:
        L = template.window_len
        kl = template.keys.shape[1] if template.keys is not None and template.keys.ndim == 2 else 1
        return OmegaStore(np.zeros((0, L), dtype=template.fwd.dtype),
                          np.zeros((0, L), dtype=template.fwd.dtype),
                          np.zeros(0, dtype=complex), np.zeros(0, dtype=complex),
                          n_states, keys=np.zeros((0, kl), dtype=np.uint8),
                          t=template.t)
    rows_f, rows_b, ws, ss, kb = [], [], [], [], []
    for key in keys_sorted:
        w, _path, s, (src_rank, row) = table[key]
        src = rank_stores[src_rank]
        rows_f.append(src.fwd[row])
        rows_b.append(src.bwd[row])
        ws.append(w)
        ss.append(s)
        kb.append(np.frombuffer(key, dtype=np.uint8))
    return OmegaStore(np.array(rows_f), np.array(rows_b),
                      np.array(ws, dtype=complex), np.array(ss, dtype=complex),
                      n_states, keys=np.array(kb), t=template.t)


def inter_worker_merge(stores):
    """In-memory reference of the merge round over key-annotated stores.

    Postcondition: every key lives on exactly one worker with the global
    complex sum and the globally largest-|weight| representative (ties by the
    smaller path, then the lower original rank).
    """
    n = len(stores)
    tables = [_store_to_table(s, r) for r, s in enumerate(stores)]
    auxes = [{} for _ in range(n)]
    done = [False] * n
    for sender in range(n):
        remote = stores[sender]  # original chunk, unchanged by construction
        for r in range(n):
            if r == sender:
                continue
            if done[r]:
                _drop_matches(tables[r], (remote.keys[i].tobytes()
                                          for i in range(len(remote))
                                          if remote.keys[i].tobytes() in tables[r]))
            else:
                _absorb_into_aux(tables[r], auxes[r], remote, sender)
        _fold_aux(tables[sender], auxes[sender])
        done[sender] = True
    return [_table_to_maps(tables[r], stores[r], stores) for r in range(n)]


def partition(store, n):
    """Split a key-annotated store into n contiguous chunks by key order."""
    if n < 1:
        raise ValueError("need at least one worker")
    if store.keys is None:
        raise ValueError("partition needs a merged (key-annotated) store")
    total = len(store)
    base, rem = divmod(total, n)
    sizes = [base + (1 if i < rem else 0) for i in range(n)]
    out = []
    lo = 0
    for size in sizes:
        out.append(store.select(np.arange(lo, lo + size)))
        lo += size
    return out


@dataclass
class RouteMap:
    """Pairwise rebalancing plan: (sender rank, receiver rank, count) triples."""

    routes: list = field(default_factory=list)


def build_route_map(counts):
    """Greedy pairing of overfull and underfull workers toward the average."""
    counts = list(counts)
    n = len(counts)
    base, rem = divmod(sum(counts), n)
    targets = [base + (1 if i < rem else 0) for i in range(n)]
    surplus = [[i, counts[i] - targets[i]] for i in range(n) if counts[i] > targets[i]]
    deficit = [[i, targets[i] - counts[i]] for i in range(n) if counts[i] < targets[i]]
    routes = []
    si = di = 0
    while si < len(surplus) and di < len(deficit):
        s, d = surplus[si], deficit[di]
        move = min(s[1], d[1])
        routes.append((s[0], d[0], move))
        s[1] -= move
        d[1] -= move
        if s[1] == 0:
            si += 1
        if d[1] == 0:
            di += 1
    return RouteMap(routes)


def _take_tail(store, count):
    """Split off the last `count` configurations in key order."""
    n = len(store)
    keep = store.select(np.arange(0, n - count))
    send = store.select(np.arange(n - count, n))
    return keep, send


def balance_load(stores):
    """Apply the route map in-memory; returns (route_map, new_stores)."""
    counts = [len(s) for s in stores]
    rmap = build_route_map(counts)
    stores = list(stores)
    for src, dst, count in rmap.routes:
        stores[src], moved = _take_tail(stores[src], count)
        stores[dst] = _merge_chunks(stores[dst], moved)
    return rmap, stores


def _merge_chunks(store, moved):
    """Append a disjoint chunk and restore key order."""
    if len(store) == 0:
        return moved
    if len(moved) == 0:
        return store
    fwd = np.concatenate([store.fwd, moved.fwd])
    bwd = np.concatenate([store.bwd, moved.bwd])
    w = np.concatenate([store.weight, moved.weight])
    s = np.concatenate([store.sum, moved.sum])
    keys = np.concatenate([store.keys, moved.keys])
    merged = OmegaStore(fwd, bwd, w, s, store.n_states, keys=keys, t=store.t)
    from .pathstore import _pack_u64_cols
    cols = _pack_u64_cols(keys)
    order = np.lexsort(tuple(cols[:, j] for j in range(cols.shape[1] - 1, -1, -1)))
    return merged.select(order)


def reduce_density(partials):
    """Sum the per-worker density matrices (rank order)."""
    partials = list(partials)
    if not partials:
        raise ValueError("nothing to reduce")
    shape = partials[0].shape
    if any(p.shape != shape for p in partials):
        raise ValueError("worker density matrices disagree in dimension")
    out = np.zeros(shape, dtype=complex)
    for p in partials:
        out = out + p
    return out


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------

class _ThreadLinks:
    """In-process transport: one queue per directed (src, dst) pair."""

    def __init__(self, n):
        self.n = n
        self.queues = {(i, j): queue.Queue()
                       for i in range(n + 1) for j in range(n + 1) if i != j}

    def send(self, src, dst, data):
        self.queues[(src, dst)].put(data)

    def recv(self, src, dst):
        return self.queues[(src, dst)].get()


class _ThreadEndpoint:
    def __init__(self, links, rank):
        self.links = links
        self.rank = rank
        self.n = links.n

    def send(self, dst, data):
        self.links.send(self.rank, self.n if dst == _CTRL else dst, data)

    def recv(self, src):
        return self.links.recv(self.n if src == _CTRL else src, self.rank)


class _PipeEndpoint:
    """Process transport over os pipes; conns[peer] is a duplex Connection."""

    def __init__(self, rank, n, conns):
        self.rank = rank
        self.n = n
        self.conns = conns

    def send(self, dst, data):
        self.conns[dst].send_bytes(data)

    def recv(self, src):
        return self.conns[src].recv_bytes()


# ---------------------------------------------------------------------------
# per-worker protocol
# ---------------------------------------------------------------------------

_CTRL = -1  # controller pseudo-rank


def _merge_round(ep, n, store_map, rank):
    """Messaging version of inter_worker_merge for one worker."""
    table = _store_to_table(store_map, rank)
    aux = {}
    been_sender = False
    blob_own = serialize_merge_message(store_map)
    for sender in range(n):
        if sender == rank:
            for r in range(n):
                if r != rank:
                    ep.send(r, blob_own)
            _fold_aux(table, aux)
            been_sender = True
        else:
            remote = deserialize_merge_message(ep.recv(sender), store_map.n_states,
                                               t=store_map.t)
            if been_sender:
                _drop_matches(table, (remote.keys[i].tobytes()
                                      for i in range(len(remote))
                                      if remote.keys[i].tobytes() in table))
            else:
                _absorb_into_aux(table, aux, remote, sender)
    return _rebuild_from_table(table, store_map)


def _rebuild_from_table(table, template):
    """Rebuild the local store; rows may come from the local template or from
    absorbed remote entries (reconstructed from their serialized paths)."""
    n_states = template.n_states
    L = template.window_len
    dtype = template.fwd.dtype
    keys_sorted = sorted(table)
    kl = template.keys.shape[1] if template.keys is not None else 1
    fwd = np.zeros((len(keys_sorted), L), dtype=dtype)
    bwd = np.zeros((len(keys_sorted), L), dtype=dtype)
    ws = np.zeros(len(keys_sorted), dtype=complex)
    ss = np.zeros(len(keys_sorted), dtype=complex)
    kb = np.zeros((len(keys_sorted), kl), dtype=np.uint8)
    for row, key in enumerate(keys_sorted):
        w, path, s, _src = table[key]
        half = len(path) // 2
        fwd[row] = _bytes_to_window(path[:half], dtype, L)
        bwd[row] = _bytes_to_window(path[half:], dtype, L)
        ws[row] = w
        ss[row] = s
        kb[row] = np.frombuffer(key, dtype=np.uint8)
    return OmegaStore(fwd, bwd, ws, ss, n_states, keys=kb, t=template.t)


def _bytes_to_window(blob, dtype, length):
    if dtype == np.uint8:
        return np.frombuffer(blob, dtype=np.uint8, count=length)
    return np.frombuffer(blob, dtype=">u2", count=length).astype(np.uint16)


def _balance_round(ep, n, store, rank):
    ep.send(_CTRL, struct.pack("<q", len(store)))
    counts = struct.unpack(f"<{n}q", ep.recv(_CTRL))
    rmap = build_route_map(counts)
    for src, dst, count in rmap.routes:
        if src == rank:
            store, moved = _take_tail(store, count)
            ep.send(dst, serialize_merge_message(moved))
        elif dst == rank:
            moved = deserialize_merge_message(ep.recv(src), store.n_states, t=store.t)
            moved.fwd = moved.fwd.astype(store.fwd.dtype)
            moved.bwd = moved.bwd.astype(store.bwd.dtype)
            store = _merge_chunks(store, moved)
    return store


def _worker_loop(rank, n, ep, spec, chunk_blob):
    store = deserialize_merge_message(chunk_blob, spec.system.m, t=0)
    store.fwd = store.fwd.astype(np.uint8 if spec.system.m <= 256 else np.uint16)
    store.bwd = store.bwd.astype(store.fwd.dtype)
    mask = spec.effective_mask()
    theta = spec.effective_theta()
    for t in range(1, spec.n_steps + 1):
        grouped = premerge(store, reduce_mask(mask))
        grouped.t = t - 1
        grouped = _merge_round(ep, n, grouped, rank)
        grouped = _balance_round(ep, n, grouped, rank)
        if len(grouped):
            store = _engine._branch(grouped, spec, t)
        else:
            store = _empty_branch(grouped, t, spec.eta.dk_max)
        local_max = float(np.abs(store.sum).max()) if len(store) else 0.0
        ep.send(_CTRL, struct.pack("<d", local_max))
        global_max = struct.unpack("<d", ep.recv(_CTRL))[0]
        rho_w = _engine.extract_density_matrix(store, spec, t)
        ep.send(_CTRL, rho_w.astype("<c16").tobytes())
        if theta > 0.0 and len(store):
            mags = np.abs(store.sum)
            keep = mags >= theta * global_max
            disc = complex(store.sum[~keep].sum())
            store = store.select(np.flatnonzero(keep))
        else:
            disc = 0j
        ep.send(_CTRL, struct.pack("<qdd", len(store), disc.real, disc.imag))


def _empty_branch(grouped, t, dk_max):
    new_len = grouped.window_len + 1
    if grouped.window_len == dk_max + 1:
        new_len -= 1  # the oldest slot would have been dropped
    return OmegaStore(np.zeros((0, new_len), dtype=grouped.fwd.dtype),
                      np.zeros((0, new_len), dtype=grouped.fwd.dtype),
                      np.zeros(0, dtype=complex), np.zeros(0, dtype=complex),
                      grouped.n_states, t=t)


def _thread_worker(rank, n, links, spec, chunk_blob):
    _worker_loop(rank, n, _ThreadEndpoint(links, rank), spec, chunk_blob)


def _process_worker(rank, n, conns, spec, chunk_blob):
    _worker_loop(rank, n, _PipeEndpoint(rank, n, conns), spec, chunk_blob)


def run_distributed(spec, n_workers, backend="thread"):
    """Run the propagation loop across n workers; one trajectory out."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if backend not in ("thread", "process"):
        raise ValueError("backend must be 'thread' or 'process'")

    m = spec.system.m
    init = _engine.initialize(spec)
    init_map = premerge(init, spec.effective_mask())
    init_map.t = 0
    chunks = partition(init_map, n_workers)
    chunk_blobs = [serialize_merge_message(c) for c in chunks]

    n_steps = spec.n_steps
    times = np.arange(n_steps + 1) * spec.dt
    rho = np.zeros((n_steps + 1, m, m), dtype=complex)
    rho[0] = spec.rho0
    drift = np.zeros(n_steps + 1)
    counts = np.zeros(n_steps + 1, dtype=np.int64)
    counts[0] = len(init)
    discarded = np.zeros(n_steps + 1, dtype=complex)

    if backend == "thread":
        links = _ThreadLinks(n_workers)
        ctrl = _ThreadEndpoint(links, n_workers)

        def ctrl_send(dst, data):
            links.send(n_workers, dst, data)

        def ctrl_recv(src):
            return links.recv(src, n_workers)

        workers = [threading.Thread(target=_thread_worker,
                                    args=(r, n_workers, links, spec, chunk_blobs[r]),
                                    daemon=True)
                   for r in range(n_workers)]
        for w in workers:
            w.start()
    else:
        # fork keeps worker startup free of main-module re-imports; POSIX only
        try:
            ctx = mp.get_context("fork")
        except ValueError:
            ctx = mp.get_context("spawn")
        worker_conns = [dict() for _ in range(n_workers)]
        ctrl_conns = {}
        for i in range(n_workers):
            for j in range(i + 1, n_workers):
                a, b = ctx.Pipe(duplex=True)
                worker_conns[i][j] = a
                worker_conns[j][i] = b
        for i in range(n_workers):
            a, b = ctx.Pipe(duplex=True)
            worker_conns[i][_CTRL] = a
            ctrl_conns[i] = b

        def ctrl_send(dst, data):
            ctrl_conns[dst].send_bytes(data)

        def ctrl_recv(src):
            return ctrl_conns[src].recv_bytes()

        workers = [ctx.Process(target=_process_worker,
                               args=(r, n_workers, worker_conns[r], spec, chunk_blobs[r]),
                               daemon=True)
                   for r in range(n_workers)]
        for w in workers:
            w.start()

    # controller side of the per-step schedule: balance counts, filter max,
    # partial density matrices, post-filter telemetry
    for t in range(1, n_steps + 1):
        cts = [struct.unpack("<q", ctrl_recv(r))[0] for r in range(n_workers)]
        packed = struct.pack(f"<{n_workers}q", *cts)
        for r in range(n_workers):
            ctrl_send(r, packed)
        maxima = [struct.unpack("<d", ctrl_recv(r))[0] for r in range(n_workers)]
        gmax = struct.pack("<d", max(maxima))
        for r in range(n_workers):
            ctrl_send(r, gmax)
        partials = []
        for r in range(n_workers):
            buf = ctrl_recv(r)
            partials.append(np.frombuffer(buf, dtype="<c16").reshape(m, m).astype(complex))
        rho[t] = reduce_density(partials)
        drift[t] = 1.0 - abs(np.trace(rho[t]))
        total = 0
        disc = 0j
        for r in range(n_workers):
            cnt, dre, dim = struct.unpack("<qdd", ctrl_recv(r))
            total += cnt
            disc += complex(dre, dim)
        counts[t] = total
        discarded[t] = disc

    for w in workers:
        w.join()
    return _engine.Trajectory(times=times, rho=rho, trace_drift=drift,
                              path_counts=counts, discarded=discarded)
