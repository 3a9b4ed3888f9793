"""Jitted collapsed-Gibbs sweep for the fixed-variance Gaussian family.

The kernel operates on flat slot arrays so it can run without the GIL,
which is what lets multiple worker threads sweep concurrently inside one
process.  Slot bookkeeping (slot <-> component id) stays in Python; the
kernel only sees numeric state.

Semantics match :func:`dpmm.sampler.gibbs_sweep`: per-sample removal,
categorical draw over existing components plus the new-component choice,
locally-born slots freed when emptied, global slots retained at count 0.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .families import FamilySpec, GAUSSIAN
from .sampler import CompState, LocalView, Shard, UNASSIGNED


@njit(cache=True, nogil=True)
def _log_b(beta, kappa, dim, s2):
    acc = 0.0
    for d in range(dim):
        acc += beta[d] * beta[d]
    return 0.5 * dim * math.log(2.0 * math.pi * s2 / kappa) + acc / (2.0 * s2 * kappa)


@njit(cache=True, nogil=True)
def _sweep(
    X,
    assign,
    beta,
    kappa,
    counts,
    active,
    local_born,
    nslots,
    uniforms,
    s2,
    kappa0,
    log_alpha,
    allow_new,
    order,
):
    n, dim = X.shape
    cap = beta.shape[0]
    logw = np.empty(cap + 1)
    slot_of = np.empty(cap + 1, np.int64)
    xbuf = np.empty(dim)
    lb_prior = _log_b(np.zeros(dim), kappa0, dim, s2)
    for t in range(n):
        i = order[t]
        for d in range(dim):
            xbuf[d] = X[i, d]
        s = assign[i]
        if s >= 0:
            counts[s] -= 1
            kappa[s] -= 1.0
            for d in range(dim):
                beta[s, d] -= xbuf[d]
            if counts[s] == 0 and local_born[s]:
                active[s] = False
        # log h(x), shared by every choice; kept so weights match the
        # reference implementation's log-marginal values
        hx = 0.0
        for d in range(dim):
            hx += xbuf[d] * xbuf[d]
        lnh = -0.5 * dim * math.log(2.0 * math.pi * s2) - hx / (2.0 * s2)
        m = -1.0e308
        k = 0
        for s2i in range(nslots):
            if not active[s2i] or counts[s2i] <= 0:
                continue
            lb0 = _log_b(beta[s2i], kappa[s2i], dim, s2)
            acc = 0.0
            for d in range(dim):
                bd = beta[s2i, d] + xbuf[d]
                acc += bd * bd
            k1 = kappa[s2i] + 1.0
            lb1 = 0.5 * dim * math.log(2.0 * math.pi * s2 / k1) + acc / (2.0 * s2 * k1)
            lw = math.log(counts[s2i]) + lnh + lb1 - lb0
            logw[k] = lw
            slot_of[k] = s2i
            if lw > m:
                m = lw
            k += 1
        if allow_new:
            acc = 0.0
            for d in range(dim):
                acc += xbuf[d] * xbuf[d]
            k1 = kappa0 + 1.0
            lb1 = 0.5 * dim * math.log(2.0 * math.pi * s2 / k1) + acc / (2.0 * s2 * k1)
            lw = log_alpha + lnh + lb1 - lb_prior
            logw[k] = lw
            slot_of[k] = -1
            if lw > m:
                m = lw
            k += 1
        total = 0.0
        for j in range(k):
            logw[j] = math.exp(logw[j] - m)
            total += logw[j]
        r = uniforms[t] * total
        acc2 = 0.0
        pick = k - 1
        for j in range(k):
            acc2 += logw[j]
            if r < acc2:
                pick = j
                break
        tgt = slot_of[pick]
        if tgt < 0:
            tgt = nslots
            nslots += 1
            active[tgt] = True
            local_born[tgt] = True
            counts[tgt] = 0
            kappa[tgt] = kappa0
            for d in range(dim):
                beta[tgt, d] = 0.0
        counts[tgt] += 1
        kappa[tgt] += 1.0
        for d in range(dim):
            beta[tgt, d] += xbuf[d]
        assign[i] = tgt
    return nslots


class FastGaussianWorkerState:
    """Slot-array mirror of (Shard, LocalView) for the jitted sweep."""

    def __init__(self, spec: FamilySpec, shard: Shard, sweeps_per_cycle: int = 1):
        if spec.kind != GAUSSIAN:
            raise ValueError("fast path supports the gaussian family only")
        self.spec = spec
        self.shard = shard
        self.X = np.ascontiguousarray(np.asarray(shard.observations, dtype=np.float64))
        n = self.X.shape[0]
        self.capacity = max(16, n * max(1, sweeps_per_cycle) + 64)
        self.beta = np.zeros((1, spec.dim))
        self.kappa = np.zeros(1)
        self.counts = np.zeros(1, np.int64)
        self.active = np.zeros(1, np.bool_)
        self.local_born = np.zeros(1, np.bool_)
        self.slot_ids: list[int] = []
        self.nslots = 0
        self.snapshot: dict[int, tuple[np.ndarray, float, int]] = {}
        self.version = 0

    def load_snapshot(self, comps: dict[int, tuple[np.ndarray, float, int]], version: int):
        """Adopt a pulled global snapshot as the local view."""
        spec = self.spec
        k = len(comps)
        cap = k + self.capacity
        self.beta = np.zeros((cap, spec.dim))
        self.kappa = np.full(cap, spec.kappa0)
        self.counts = np.zeros(cap, np.int64)
        self.active = np.zeros(cap, np.bool_)
        self.local_born = np.zeros(cap, np.bool_)
        self.slot_ids = []
        self.snapshot = {}
        self.version = version
        for idx, cid in enumerate(sorted(comps)):
            b, kap, n = comps[cid]
            self.beta[idx] = b
            self.kappa[idx] = kap
            self.counts[idx] = n
            self.active[idx] = True
            self.slot_ids.append(cid)
            self.snapshot[cid] = (np.asarray(b, dtype=float).copy(), float(kap), int(n))
        self.nslots = k
        # rewrite shard labels (already remapped to global ids) into slots
        slot_of = {cid: i for i, cid in enumerate(self.slot_ids)}
        a = self.shard.assignments
        out = np.full(len(a), -1, np.int64)
        for i, lab in enumerate(a):
            if lab != UNASSIGNED:
                out[i] = slot_of[int(lab)]
        self._slots = out

    def sweep(self, rng: np.random.Generator, sweeps: int = 1, *,
              allow_new: bool = True, shuffle: bool = False):
        n = self.X.shape[0]
        if n == 0:
            return
        for _ in range(sweeps):
            order = np.arange(n)
            if shuffle:
                rng.shuffle(order)
            uniforms = rng.random(n)
            self.nslots = _sweep(
                self.X,
                self._slots,
                self.beta,
                self.kappa,
                self.counts,
                self.active,
                self.local_born,
                self.nslots,
                uniforms,
                self.spec.sigma**2,
                self.spec.kappa0,
                math.log(self.spec.alpha),
                allow_new,
                order,
            )

    def to_view(self) -> LocalView:
        """Materialize the slot state as a LocalView with labels applied."""
        view = LocalView(version=self.version)
        view.snapshot = {
            cid: (b.copy(), k, n) for cid, (b, k, n) in self.snapshot.items()
        }
        temp = -1
        labels = {}
        for s in range(self.nslots):
            if not self.active[s]:
                continue
            if s < len(self.slot_ids):
                cid = self.slot_ids[s]
            else:
                cid = temp
                temp -= 1
            labels[s] = cid
            view.components[cid] = CompState(
                self.beta[s].copy(), float(self.kappa[s]), int(self.counts[s])
            )
        view._next_local = temp
        a = self.shard.assignments
        for i, s in enumerate(self._slots):
            a[i] = UNASSIGNED if s < 0 else labels[int(s)]
        return view
