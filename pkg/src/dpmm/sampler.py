"""Local collapsed Gibbs sampling over a data shard.

A worker owns a :class:`Shard` (its observations and current labels) and a
:class:`LocalView` of the component pool, built from the last global
snapshot it pulled.  Sweeps reassign samples one at a time; the net effect
of a cycle is extracted as a :class:`Delta` (per-component differences
against the snapshot plus fully-new local components).

Labels: positive integers are global component ids, negative integers are
worker-local temporary ids, 0 means unassigned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .families import (
    FamilySpec,
    PosteriorParams,
    SuffStats,
    log_marginal,
    obs_scale,
    prior_params,
)

UNASSIGNED = 0


@dataclass
class CompState:
    """Mutable per-component state inside a worker's local view."""

    beta: np.ndarray
    kappa: float
    n: int


@dataclass
class Shard:
    observations: np.ndarray | list
    assignments: np.ndarray
    shard_id: int = 0

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if len(self.assignments) != len(self.observations):
            raise ValueError("assignments length must equal observations length")

    def __len__(self):
        return len(self.assignments)


@dataclass
class LocalView:
    """A worker's local version of the component pool.

    ``snapshot`` keeps the pulled global parameters untouched so the cycle
    delta can be computed by difference.  ``components`` is mutated by
    sweeps; locally-created components get fresh negative ids.
    """

    components: dict[int, CompState] = field(default_factory=dict)
    snapshot: dict[int, tuple[np.ndarray, float, int]] = field(default_factory=dict)
    version: int = 0
    _next_local: int = -1

    @classmethod
    def from_snapshot(cls, comps: dict[int, tuple[np.ndarray, float, int]], version: int) -> "LocalView":
        view = cls(version=version)
        view.snapshot = {cid: (b.copy(), k, n) for cid, (b, k, n) in comps.items()}
        view.components = {
            cid: CompState(b.copy(), k, n) for cid, (b, k, n) in comps.items()
        }
        return view

    def new_local_id(self) -> int:
        cid = self._next_local
        self._next_local -= 1
        return cid


@dataclass
class Delta:
    """Per-cycle differences pushed from a worker to the master."""

    entries: list[tuple[int, np.ndarray, float, int]]  # (cid, dbeta, dkappa, dn)
    new_components: list[tuple[int, SuffStats]]  # (temp-id, raw stats)
    worker_id: int = 0
    based_on_version: int = 0


def assignment_distribution(x, view: LocalView, spec: FamilySpec):
    """Unnormalized log weights of the K+1 assignment choices for x.

    The caller must have removed x from whichever component held it.
    Returns (ids, logw) where ids[k] is the component id of choice k and
    the final entry (id None) is the new-component choice.
    """
    ids = []
    logw = []
    for cid, comp in view.components.items():
        if comp.n <= 0:
            continue
        ids.append(cid)
        p = PosteriorParams(comp.beta, comp.kappa)
        logw.append(math.log(comp.n) + log_marginal(x, p, spec))
    ids.append(None)
    logw.append(math.log(spec.alpha) + log_marginal(x, prior_params(spec), spec))
    return ids, np.asarray(logw)


def _sample_index(logw: np.ndarray, u: float) -> int:
    # max-subtraction normalization; u is a uniform draw in [0, 1)
    w = np.exp(logw - logw.max())
    r = u * w.sum()
    acc = 0.0
    for i, wi in enumerate(w):
        acc += wi
        if r < acc:
            return i
    return len(w) - 1


def _remove(view: LocalView, cid: int, x: np.ndarray, c: float):
    comp = view.components[cid]
    comp.beta -= x
    comp.kappa -= c
    comp.n -= 1
    # locally-born components vanish when emptied; globals stay (their
    # mass may live on other workers)
    if comp.n == 0 and cid < 0:
        del view.components[cid]


def _add(view: LocalView, cid: int, x: np.ndarray, c: float):
    comp = view.components[cid]
    comp.beta += x
    comp.kappa += c
    comp.n += 1


def gibbs_sweep(
    shard: Shard,
    view: LocalView,
    spec: FamilySpec,
    rng: np.random.Generator,
    *,
    uniforms: np.ndarray | None = None,
    allow_new: bool = True,
    shuffle: bool = False,
):
    """One collapsed Gibbs sweep over the shard, in place.

    Visits observations in index order (random scan with ``shuffle``).
    ``uniforms`` may supply the per-sample categorical draws explicitly,
    which keeps this reference path comparable with the jitted fast path.
    """
    n = len(shard)
    if n == 0:
        return shard, view
    order = np.arange(n)
    if shuffle:
        rng.shuffle(order)
    if uniforms is None:
        uniforms = rng.random(n)
    obs = shard.observations
    for i in order:
        x = np.asarray(obs[i], dtype=float)
        c = obs_scale(x, spec)
        z = shard.assignments[i]
        if z != UNASSIGNED:
            _remove(view, int(z), x, c)
        ids, logw = assignment_distribution(x, view, spec)
        if not allow_new:
            ids = ids[:-1]
            logw = logw[:-1]
        choice = ids[_sample_index(logw, float(uniforms[i]))]
        if choice is None:
            choice = view.new_local_id()
            p0 = prior_params(spec)
            view.components[choice] = CompState(p0.beta + x, p0.kappa + c, 1)
        else:
            _add(view, choice, x, c)
        shard.assignments[i] = choice
    return shard, view


def compute_deltas(view: LocalView, spec: FamilySpec, worker_id: int = 0) -> Delta:
    """Extract the cycle delta: exact differences against the snapshot for
    known components, full raw stats for locally-created ones."""
    entries = []
    for cid, (b0, k0, n0) in view.snapshot.items():
        comp = view.components.get(cid)
        if comp is None:
            # globals are never deleted locally; emptied globals remain with
            # zero local mass, so absence means zero change
            continue
        entries.append((cid, comp.beta - b0, comp.kappa - k0, comp.n - n0))
    new = []
    for cid in sorted((c for c in view.components if c < 0), reverse=True):
        comp = view.components[cid]
        if comp.n <= 0:
            continue
        new.append((cid, SuffStats(comp.beta - spec.beta0, comp.n)))
    return Delta(entries, new, worker_id=worker_id, based_on_version=view.version)


def worker_rng(master_seed: int, worker_id: int, cycle: int) -> np.random.Generator:
    """Deterministic per-(worker, cycle) stream derived from the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(worker_id, cycle))
    )
