"""Master/worker orchestration with delayed synchronization.

Synchronous modes run one barrier round per iteration: every worker pulls
a snapshot, sweeps its shard, and pushes a delta; the master absorbs all
M deltas (progressively or pooled) and publishes a new version.  The
asynchronous mode drops the barrier: each worker loops on its own
schedule while the master interleaves delta absorption with short
pooled-consolidation slices.

All cross-thread communication is by-value: encoded wire frames moving
through bounded queues (in-process transport) or TCP sockets.  The same
encoding feeds the byte accounting in both cases.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .consolidate import (
    GlobalPool,
    ProtocolError,
    absorb_existing,
    append_new_atomic,
    pooled_consolidate,
    progressive_consolidate,
)
from .families import FamilySpec, GAUSSIAN
from .fastpath import FastGaussianWorkerState
from .metrics import TraceRecord, cluster_stats, loglik_from_stats, sum_log_h
from .sampler import (
    UNASSIGNED,
    Delta,
    LocalView,
    Shard,
    compute_deltas,
    gibbs_sweep,
    worker_rng,
)

MODES = ("serial", "sync-prog", "sync-pooled", "async")
TRANSPORTS = ("in-process", "tcp")


@dataclass
class RunConfig:
    family: FamilySpec
    mode: str = "serial"
    workers: int = 1
    iterations: int = 10
    sweeps_per_cycle: int = 1
    pooled_iters: int = 50
    seed: int = 0
    transport: str = "in-process"
    listen: str = "127.0.0.1:0"
    shuffle: bool = False
    subcomp_cap: int = 64
    allow_new: bool = True
    include_crp: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.mode == "serial":
            self.workers = 1
        if self.workers < 1 or self.iterations < 0:
            raise ValueError("workers must be >= 1 and iterations >= 0")


@dataclass
class RunResult:
    trace: list[TraceRecord]
    labels: np.ndarray
    pool: GlobalPool
    mode: str
    wall_s: float
    msgs: int = 0
    bytes: int = 0
    aborted: bool = False


class _Counters:
    """Data-plane message accounting (Snapshot and DeltaPush frames)."""

    def __init__(self):
        self.msgs = 0
        self.bytes = 0
        self._lock = threading.Lock()

    def count(self, nbytes: int):
        with self._lock:
            self.msgs += 1
            self.bytes += nbytes

    def snap(self) -> tuple[int, int]:
        with self._lock:
            return self.msgs, self.bytes


class QueueChannel:
    """Bounded in-process byte-frame channel with blocking backpressure."""

    def __init__(self, tx: queue.Queue, rx: queue.Queue):
        self._tx = tx
        self._rx = rx

    def send(self, frame: bytes):
        self._tx.put(frame)

    def recv(self) -> bytes:
        return self._rx.get()


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    def send(self, frame: bytes):
        with self._lock:
            self._sock.sendall(frame)

    def recv(self) -> bytes:
        return wire.read_frame(self._sock)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class Master:
    """Owns the global pool; all mutations go through one thread."""

    def __init__(self, spec: FamilySpec, subcomp_cap: int, seed: int):
        self.spec = spec
        self.pool = GlobalPool(spec, subcomp_cap)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(0xC0FFEE,))
        )
        self.temp_maps: dict[int, dict[int, int]] = {}
        self.last_pull: dict[int, int] = {}

    def seed_from_labels(self, observations, labels):
        """Warm-start the pool from an initial labeling; returns the
        label -> component-id mapping."""
        stats = cluster_stats(np.asarray(observations, dtype=float), labels, self.spec)
        from .consolidate import Component

        mapping = {}
        for lab in sorted(stats):
            beta, kappa, n = stats[lab]
            cid = self.pool.new_id()
            self.pool.add(Component(cid, beta, kappa, n, subs=None))
            mapping[lab] = cid
        return mapping

    def snapshot_msg(self, worker_id: int) -> wire.SnapshotMsg:
        pool = self.pool
        remap = pool.remap_since(self.last_pull.get(worker_id, 0))
        for temp, gid in sorted(self.temp_maps.get(worker_id, {}).items(), reverse=True):
            live = pool.resolve(gid)
            remap.append((temp, 0 if live is None else live))
        comps = [
            (cid, float(c.kappa), int(c.n), c.atomic, c.beta)
            for cid, c in sorted(pool.components.items())
        ]
        msg = wire.SnapshotMsg(pool.version, remap, comps)
        self.last_pull[worker_id] = pool.version
        self.temp_maps[worker_id] = {}
        self._compact()
        return msg

    def _compact(self):
        if not self.last_pull:
            return
        low = min(self.last_pull.values())
        self.pool.remap_log = [r for r in self.pool.remap_log if r[0] > low]

    def absorb_round(self, deltas: list[Delta], mode: str, pooled_iters: int):
        """Synchronous round: all M deltas at once, in worker-id order."""
        deltas = sorted(deltas, key=lambda d: d.worker_id)
        if mode == "sync-prog":
            mappings = progressive_consolidate(self.pool, deltas, self.spec, self.rng)
            for wid, mapping in mappings.items():
                self.temp_maps.setdefault(wid, {}).update(mapping)
        else:  # serial / sync-pooled: append new components, then MH
            for delta in deltas:
                absorb_existing(self.pool, delta)
                mapping = append_new_atomic(self.pool, delta)
                self.temp_maps.setdefault(delta.worker_id, {}).update(mapping)
            if mode == "sync-pooled" and pooled_iters > 0:
                pooled_consolidate(self.pool, pooled_iters, self.spec, self.rng)
        self.pool.version += 1

    def absorb_async(self, delta: Delta):
        absorb_existing(self.pool, delta)
        mapping = append_new_atomic(self.pool, delta)
        self.temp_maps.setdefault(delta.worker_id, {}).update(mapping)
        self.pool.version += 1


def master_round_sync(
    pool: GlobalPool,
    deltas: list[Delta],
    mode: str,
    spec: FamilySpec,
    rng: np.random.Generator,
    pooled_iters: int = 0,
) -> GlobalPool:
    """One synchronous consolidation round over a bare pool (library
    surface; the Master class adds id-mapping bookkeeping on top)."""
    deltas = sorted(deltas, key=lambda d: d.worker_id)
    if mode == "sync-prog":
        progressive_consolidate(pool, deltas, spec, rng)
    else:
        for delta in deltas:
            absorb_existing(pool, delta)
            append_new_atomic(pool, delta)
        if mode == "sync-pooled" and pooled_iters > 0:
            pooled_consolidate(pool, pooled_iters, spec, rng)
    pool.version += 1
    return pool


class WorkerRunner:
    """One worker's shard plus sweep state; gaussian shards use the
    jitted fast path."""

    def __init__(self, worker_id: int, shard: Shard, cfg: RunConfig):
        self.worker_id = worker_id
        self.shard = shard
        self.cfg = cfg
        self.spec = cfg.family
        self.fast = self.spec.kind == GAUSSIAN
        if self.fast:
            self.state = FastGaussianWorkerState(
                self.spec, shard, cfg.sweeps_per_cycle
            )
        self.last_version = 0

    def apply_remap(self, remap: list[tuple[int, int]]):
        if not remap:
            return
        table = dict(remap)
        a = self.shard.assignments
        for i in range(len(a)):
            lab = int(a[i])
            if lab in table:
                a[i] = table[lab] if table[lab] != 0 else UNASSIGNED

    def cycle(self, snap: wire.SnapshotMsg, cycle_idx: int) -> Delta:
        self.apply_remap(snap.remap)
        comps = {cid: (beta, kappa, n) for cid, kappa, n, _, beta in snap.components}
        rng = worker_rng(self.cfg.seed, self.worker_id, cycle_idx)
        cfg = self.cfg
        if self.fast:
            self.state.load_snapshot(comps, snap.version)
            self.state.sweep(
                rng,
                cfg.sweeps_per_cycle,
                allow_new=cfg.allow_new,
                shuffle=cfg.shuffle,
            )
            view = self.state.to_view()
        else:
            view = LocalView.from_snapshot(comps, snap.version)
            for _ in range(cfg.sweeps_per_cycle):
                gibbs_sweep(
                    self.shard,
                    view,
                    self.spec,
                    rng,
                    allow_new=cfg.allow_new,
                    shuffle=cfg.shuffle,
                )
        self.last_version = snap.version
        return compute_deltas(view, self.spec, self.worker_id)


def _partition(observations: np.ndarray, workers: int, labels: np.ndarray | None):
    n = len(observations)
    idxs = [np.arange(l, n, workers) for l in range(workers)]
    shards = []
    for l, idx in enumerate(idxs):
        assign = np.zeros(len(idx), np.int64) if labels is None else labels[idx].copy()
        shards.append(Shard(observations[idx], assign, shard_id=l))
    return idxs, shards


def _trace_loglik(pool: GlobalPool, lnh_total: float, spec: FamilySpec, include_crp: bool) -> float:
    stats = [
        (c.beta, c.kappa, c.n) for c in pool.components.values() if c.n > 0
    ]
    if not stats:
        return float("-inf")
    return loglik_from_stats(stats, lnh_total, spec, include_crp)


def run(config: RunConfig, observations, initial_labels=None) -> RunResult:
    """Execute one end-to-end estimation run and return trace + labels."""
    observations = np.asarray(observations, dtype=float)
    spec = config.family
    master = Master(spec, config.subcomp_cap, config.seed)
    shard_labels = None
    if initial_labels is not None:
        mapping = master.seed_from_labels(observations, initial_labels)
        shard_labels = np.array([mapping[int(z)] for z in initial_labels], np.int64)
    idxs, shards = _partition(observations, config.workers, shard_labels)
    lnh_total = sum_log_h(observations, spec)
    start = time.perf_counter()
    if config.mode == "serial":
        trace = _run_serial(config, master, shards[0], lnh_total)
        aborted = False
    elif config.mode == "async":
        trace, aborted = _run_async(config, master, shards, lnh_total)
    else:
        trace, aborted = _run_sync(config, master, shards, lnh_total)
    wall = time.perf_counter() - start
    labels = np.empty(len(observations), np.int64)
    for idx, shard in zip(idxs, shards):
        labels[idx] = shard.assignments
    # labels can lag consolidations that happened after the final pull;
    # resolve every id through the remap chain
    resolved = {}
    for i, lab in enumerate(labels):
        lab = int(lab)
        if lab not in resolved:
            live = master.pool.resolve(lab) if lab != UNASSIGNED else None
            resolved[lab] = UNASSIGNED if live is None else live
        labels[i] = resolved[lab]
    msgs = trace[-1].msgs if trace else 0
    nbytes = trace[-1].bytes if trace else 0
    return RunResult(trace, labels, master.pool, config.mode, wall, msgs, nbytes, aborted)


def _run_serial(config, master: Master, shard: Shard, lnh_total: float):
    runner = WorkerRunner(0, shard, config)
    trace = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        snap = master.snapshot_msg(0)
        delta = runner.cycle(snap, it)
        master.absorb_round([delta], "serial", 0)
        trace.append(
            TraceRecord(
                it,
                (time.perf_counter() - t0) * 1e3,
                _trace_loglik(master.pool, lnh_total, config.family, config.include_crp),
                master.pool.live_count(),
                0,
                0,
                config.mode,
            )
        )
    runner.apply_remap(master.snapshot_msg(0).remap)
    return trace


def _make_channels(config, workers: int):
    """Channel pairs (master side, worker side) for the configured
    transport.  TCP runs over loopback with one connection per worker."""
    if config.transport == "in-process":
        pairs = []
        for _ in range(workers):
            a, b = queue.Queue(maxsize=4), queue.Queue(maxsize=4)
            pairs.append((QueueChannel(a, b), QueueChannel(b, a)))
        return pairs, None
    host, _, port = config.listen.rpartition(":")
    srv = socket.create_server((host or "127.0.0.1", int(port or 0)))
    addr = srv.getsockname()
    worker_socks = []
    accept_done = threading.Event()
    accepted = {}

    def _accept():
        for _ in range(workers):
            conn, _ = srv.accept()
            hello = wire.decode(wire.read_frame(conn))
            if not isinstance(hello, wire.PullRequest):
                raise ProtocolError("expected handshake PullRequest")
            accepted[hello.worker_id] = conn
        accept_done.set()

    acceptor = threading.Thread(target=_accept, daemon=True)
    acceptor.start()
    for wid in range(workers):
        cs = socket.create_connection(addr)
        cs.sendall(wire.encode(wire.PullRequest(wid, 0)))
        worker_socks.append(cs)
    accept_done.wait(timeout=30)
    acceptor.join()
    srv.close()
    pairs = [
        (SocketChannel(accepted[wid]), SocketChannel(worker_socks[wid]))
        for wid in range(workers)
    ]
    return pairs, srv


def _run_sync(config, master: Master, shards, lnh_total):
    m = config.workers
    dim = config.family.dim
    pairs, _ = _make_channels(config, m)
    counters = _Counters()
    errors: list[BaseException] = []

    def worker_main(wid: int):
        try:
            chan = pairs[wid][1]
            runner = WorkerRunner(wid, shards[wid], config)
            for it in range(config.iterations):
                msg = wire.decode(chan.recv(), dim)
                delta = runner.cycle(msg, it)
                chan.send(wire.encode(wire.DeltaPush(delta)))
            final = wire.decode(chan.recv(), dim)
            runner.apply_remap(final.remap)
        except BaseException as exc:  # surfaced by the driver
            errors.append(exc)

    threads = [
        threading.Thread(target=worker_main, args=(wid,), daemon=True)
        for wid in range(m)
    ]
    for t in threads:
        t.start()
    trace = []
    t0 = time.perf_counter()
    try:
        for it in range(config.iterations):
            for wid in range(m):
                frame = wire.encode(master.snapshot_msg(wid))
                counters.count(len(frame))
                pairs[wid][0].send(frame)
            deltas = []
            for wid in range(m):
                frame = pairs[wid][0].recv()
                counters.count(len(frame))
                msg = wire.decode(frame, dim)
                deltas.append(msg.delta)
            master.absorb_round(deltas, config.mode, config.pooled_iters)
            msgs, nbytes = counters.snap()
            trace.append(
                TraceRecord(
                    it,
                    (time.perf_counter() - t0) * 1e3,
                    _trace_loglik(master.pool, lnh_total, config.family, config.include_crp),
                    master.pool.live_count(),
                    msgs,
                    nbytes,
                    config.mode,
                )
            )
        for wid in range(m):
            pairs[wid][0].send(wire.encode(master.snapshot_msg(wid)))
    finally:
        for t in threads:
            t.join(timeout=60)
    if errors:
        raise errors[0]
    return trace, False


def _run_async(config, master: Master, shards, lnh_total):
    m = config.workers
    dim = config.family.dim
    pairs, _ = _make_channels(config, m)
    counters = _Counters()
    inbox: queue.Queue = queue.Queue()
    errors: list[BaseException] = []

    def pump(wid: int):
        # TCP connections need a reader thread to feed the master inbox;
        # in-process channels are pumped the same way for uniformity
        chan = pairs[wid][0]
        while True:
            try:
                frame = chan.recv()
            except wire.WireError:
                return
            inbox.put((wid, frame))
            msg_tag = frame[3]
            if msg_tag == wire.TAG_SHUTDOWN:
                return

    def worker_main(wid: int):
        try:
            chan = pairs[wid][1]
            runner = WorkerRunner(wid, shards[wid], config)
            chan.send(wire.encode(wire.PullRequest(wid, 0)))
            for cycle in range(config.iterations):
                snap = wire.decode(chan.recv(), dim)
                delta = runner.cycle(snap, cycle)
                chan.send(wire.encode(wire.DeltaPush(delta)))
                chan.send(wire.encode(wire.PullRequest(wid, snap.version)))
            final = wire.decode(chan.recv(), dim)
            runner.apply_remap(final.remap)
            chan.send(wire.encode(wire.Shutdown()))
        except BaseException as exc:
            errors.append(exc)
            try:
                pairs[wid][1].send(wire.encode(wire.Shutdown()))
            except Exception:
                pass

    pumps = [threading.Thread(target=pump, args=(w,), daemon=True) for w in range(m)]
    workers = [
        threading.Thread(target=worker_main, args=(w,), daemon=True) for w in range(m)
    ]
    for t in pumps + workers:
        t.start()
    trace = []
    done = 0
    events = 0
    t0 = time.perf_counter()
    rng = master.rng
    while done < m:
        try:
            wid, frame = inbox.get_nowait()
        except queue.Empty:
            # idle: refine the pool in short MH slices
            if master.pool.live_count() >= 2:
                pooled_consolidate(master.pool, 10, config.family, rng)
                master.pool.version += 1
            else:
                time.sleep(0.0002)
            continue
        msg = wire.decode(frame, dim)
        if isinstance(msg, wire.PullRequest):
            out = wire.encode(master.snapshot_msg(msg.worker_id))
            counters.count(len(out))
            pairs[msg.worker_id][0].send(out)
        elif isinstance(msg, wire.DeltaPush):
            counters.count(len(frame))
            master.absorb_async(msg.delta)
            msgs, nbytes = counters.snap()
            trace.append(
                TraceRecord(
                    events,
                    (time.perf_counter() - t0) * 1e3,
                    _trace_loglik(master.pool, lnh_total, config.family, config.include_crp),
                    master.pool.live_count(),
                    msgs,
                    nbytes,
                    config.mode,
                )
            )
            events += 1
        elif isinstance(msg, wire.Shutdown):
            done += 1
    for t in workers:
        t.join(timeout=60)
    aborted = bool(errors)
    if errors:
        raise errors[0]
    # settle: consolidate now that all deltas are in.  Duplicate components
    # created on different workers need O(K) proposals each to be found by
    # uniform pair proposals, so size the slices by the live count and
    # repeat until the pool stops shrinking.
    if master.pool.live_count() >= 2 and config.pooled_iters > 0:
        for _ in range(50):
            before = master.pool.live_count()
            slice_iters = max(config.pooled_iters, 50 * before)
            pooled_consolidate(master.pool, slice_iters, config.family, rng)
            master.pool.version += 1
            if master.pool.live_count() >= before:
                break
    return trace, aborted
