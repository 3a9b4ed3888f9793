"""Master-side component identification and merging.

The master owns a :class:`GlobalPool` of components.  Incoming worker
deltas are absorbed additively; locally-created components are reconciled
either one by one (progressive consolidation) or in bulk by a
Metropolis-Hastings chain alternating merge and split proposals (pooled
consolidation).

Every component tracks its set of atomic sub-components.  Atoms are the
indivisible units created by local updates; a split proposal can only
rearrange a component's atoms, never cut through one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .families import FamilySpec, PosteriorParams, log_partition
from .sampler import Delta


class ProtocolError(RuntimeError):
    """A delta referenced an id the pool cannot resolve, or corrupt counts."""


@dataclass
class Component:
    """A global (or candidate) cluster.

    ``subs`` is None for atomic components; otherwise the list of atomic
    constituents sorted by ascending id (the canonical order used for the
    single-component probability).
    """

    cid: int
    beta: np.ndarray
    kappa: float
    n: int
    subs: list["Component"] | None = None

    @property
    def atomic(self) -> bool:
        return self.subs is None

    def atoms(self) -> list["Component"]:
        return [self] if self.subs is None else self.subs


def _log_b(spec: FamilySpec, beta: np.ndarray, kappa: float) -> float:
    # hot path of every merge-split ratio; bypasses parameter validation
    if spec.kind == "gaussian":
        s2 = spec.sigma * spec.sigma
        if beta.size <= 2:
            # ufunc dispatch dominates tiny dot products
            bb = sum(v * v for v in beta.tolist())
        else:
            bb = float(beta @ beta)
        return 0.5 * spec.dim * math.log(2.0 * math.pi * s2 / kappa) + bb / (
            2.0 * s2 * kappa
        )
    return log_partition(spec, PosteriorParams(beta, kappa))


def log_merge_split_ratio(a: Component, b: Component, spec: FamilySpec) -> float:
    """Log posterior odds that a and b arose from one component vs two.

    Computed from sufficient statistics only; symmetric in its arguments.
    """
    if a.n < 1 or b.n < 1:
        raise ValueError("merge-split ratio requires nonempty components")
    beta12 = a.beta + b.beta - spec.beta0
    kappa12 = a.kappa + b.kappa - spec.kappa0
    return (
        -math.log(spec.alpha)
        + math.lgamma(a.n + b.n)
        - math.lgamma(a.n)
        - math.lgamma(b.n)
        + _log_b(spec, beta12, kappa12)
        + _log_b(spec, spec.beta0, spec.kappa0)
        - _log_b(spec, a.beta, a.kappa)
        - _log_b(spec, b.beta, b.kappa)
    )


def merge_stats(a: Component, b: Component, spec: FamilySpec, cid: int = 0) -> Component:
    """Combined component with stats prior + raw(a) + raw(b)."""
    atoms = sorted(a.atoms() + b.atoms(), key=lambda c: c.cid)
    return Component(
        cid,
        a.beta + b.beta - spec.beta0,
        a.kappa + b.kappa - spec.kappa0,
        a.n + b.n,
        subs=atoms,
    )


def component_from_atoms(atoms: list[Component], spec: FamilySpec, cid: int = 0) -> Component:
    """Build the component spanned by ``atoms`` (returned as-is if single)."""
    if len(atoms) == 1:
        return atoms[0]
    atoms = sorted(atoms, key=lambda c: c.cid)
    beta = spec.beta0 + sum((a.beta - spec.beta0) for a in atoms)
    kappa = spec.kappa0 + sum(a.kappa - spec.kappa0 for a in atoms)
    n = sum(a.n for a in atoms)
    return Component(cid, beta, kappa, n, subs=atoms)


def single_component_log_prob(subs: list[Component], spec: FamilySpec) -> float:
    """Log probability that restricted consolidation of ``subs`` re-forms a
    single component: sum over prefix factors log[rho / (rho + 1)]."""
    if len(subs) < 2:
        raise ValueError("need at least 2 subcomponents")
    subs = sorted(subs, key=lambda c: c.cid)
    run = Component(0, subs[0].beta.copy(), subs[0].kappa, subs[0].n)
    total = 0.0
    for a in subs[1:]:
        lr = log_merge_split_ratio(run, a, spec)
        total += lr - np.logaddexp(lr, 0.0)
        run = merge_stats(run, a, spec)
    return total


def restricted_consolidate(
    subs: list[Component], spec: FamilySpec, rng: np.random.Generator
) -> tuple[list[list[Component]], float]:
    """Unpack-and-reconsolidate the atoms of a component.

    Returns (sides, log_gamma): one or two groups of atoms and the log
    probability of the realized sequence of choices.  Once a second group
    has opened, atoms can only join one of the two groups.
    """
    if len(subs) < 2:
        raise ValueError("need at least 2 subcomponents")
    subs = sorted(subs, key=lambda c: c.cid)
    side1 = [subs[0]]
    side2: list[Component] = []
    r1 = Component(0, subs[0].beta.copy(), subs[0].kappa, subs[0].n)
    r2: Component | None = None
    log_gamma = 0.0
    for a in subs[1:]:
        w1 = log_merge_split_ratio(r1, a, spec)
        w2 = 0.0 if r2 is None else log_merge_split_ratio(r2, a, spec)
        z = np.logaddexp(w1, w2)
        if math.log(rng.random()) < w1 - z:
            log_gamma += w1 - z
            side1.append(a)
            r1 = merge_stats(r1, a, spec)
        else:
            log_gamma += w2 - z
            side2.append(a)
            r2 = a if r2 is None else merge_stats(r2, a, spec)
    sides = [side1] if not side2 else [side1, side2]
    return sides, log_gamma


def restricted_log_gamma(
    subs: list[Component], side2_ids: set[int], spec: FamilySpec
) -> float:
    """Log probability that restricted consolidation yields exactly the
    bipartition whose second group is ``side2_ids``.

    The group containing the first atom (canonical order) is necessarily
    the first one, so the caller must put the other group in side2_ids.
    """
    subs = sorted(subs, key=lambda c: c.cid)
    if subs[0].cid in side2_ids:
        raise ValueError("the first atom always seeds the first group")
    r1 = Component(0, subs[0].beta.copy(), subs[0].kappa, subs[0].n)
    r2: Component | None = None
    log_gamma = 0.0
    for a in subs[1:]:
        w1 = log_merge_split_ratio(r1, a, spec)
        w2 = 0.0 if r2 is None else log_merge_split_ratio(r2, a, spec)
        z = np.logaddexp(w1, w2)
        if a.cid in side2_ids:
            log_gamma += w2 - z
            r2 = a if r2 is None else merge_stats(r2, a, spec)
        else:
            log_gamma += w1 - z
            r1 = merge_stats(r1, a, spec)
    return log_gamma


DELETED = 0


class GlobalPool:
    """The master's versioned collection of components.

    ``remap_log`` is an append-only list of (version, old-id, new-id)
    records; new-id 0 marks deletion.  Ids are never reused.
    """

    def __init__(self, spec: FamilySpec, subcomp_cap: int = 64):
        self.spec = spec
        self.subcomp_cap = subcomp_cap
        self.components: dict[int, Component] = {}
        self.version = 0
        self.remap_log: list[tuple[int, int, int]] = []
        self._next_id = 1
        self._remap: dict[int, int] = {}

    def new_id(self) -> int:
        cid = self._next_id
        self._next_id += 1
        return cid

    def resolve(self, cid: int) -> int | None:
        """Follow the remap chain until a live id (or deletion)."""
        seen = 0
        while cid not in self.components:
            if cid not in self._remap:
                return None
            cid = self._remap[cid]
            if cid == DELETED:
                return None
            seen += 1
            if seen > len(self._remap) + 1:
                raise ProtocolError("remap cycle detected")
        return cid

    def record_remap(self, old: int, new: int):
        # remap entries become visible with the next published version
        self.remap_log.append((self.version + 1, old, new))
        self._remap[old] = new

    def add(self, comp: Component):
        if comp.cid in self.components:
            raise ProtocolError(f"duplicate component id {comp.cid}")
        self.components[comp.cid] = comp

    def delete(self, cid: int):
        del self.components[cid]
        self.record_remap(cid, DELETED)

    def total_count(self) -> int:
        return sum(c.n for c in self.components.values())

    def live_count(self) -> int:
        return sum(1 for c in self.components.values() if c.n > 0)

    def remap_since(self, version: int) -> list[tuple[int, int]]:
        """Fully-resolved (old -> live-or-deleted) pairs for remap entries
        newer than ``version``."""
        olds = {old for v, old, _ in self.remap_log if v > version}
        out = []
        for old in sorted(olds):
            live = self.resolve(old)
            out.append((old, DELETED if live is None else live))
        return out


def _delta_component(pool: GlobalPool, psi: np.ndarray, count: int) -> Component:
    spec = pool.spec
    if spec.kind == "gaussian":
        kappa = spec.kappa0 + count
    else:
        kappa = spec.kappa0 + float(psi.sum())
    return Component(pool.new_id(), spec.beta0 + psi, kappa, count, subs=None)


def _apply_entry(pool: GlobalPool, cid: int, dbeta: np.ndarray, dkappa: float, dn: int):
    """Add an existing-component delta to the (remap-resolved) target.

    Deltas against deleted ids with positive mass resurrect the component:
    the delta is exactly the remaining global contribution.
    """
    target = pool.resolve(cid)
    if target is None:
        if cid in pool._remap or cid in (old for _, old, _ in pool.remap_log):
            if dn > 0:
                comp = _delta_component(pool, dbeta, dn)
                pool.add(comp)
                pool.record_remap(cid, comp.cid)
            # dn <= 0 against a deleted component: already accounted
            return
        raise ProtocolError(f"delta references unknown component id {cid}")
    comp = pool.components[target]
    comp.beta = comp.beta + dbeta
    comp.kappa += dkappa
    comp.n += dn
    if comp.n <= 0:
        pool.delete(target)
        return
    if not comp.atomic:
        # keep the subcomponent closure: fold the change into the heaviest
        # atom; collapse to atomic if that would empty it
        atom = max(comp.subs, key=lambda a: (a.n, a.cid))
        if atom.n + dn <= 0:
            comp.subs = None
        else:
            atom.beta = atom.beta + dbeta
            atom.kappa += dkappa
            atom.n += dn


def absorb_existing(pool: GlobalPool, delta: Delta):
    for cid, dbeta, dkappa, dn in delta.entries:
        if np.any(dbeta != 0) or dkappa != 0 or dn != 0:
            _apply_entry(pool, cid, np.asarray(dbeta, dtype=float), dkappa, int(dn))


def append_new_atomic(pool: GlobalPool, delta: Delta) -> dict[int, int]:
    """Append every new component as a fresh atomic pool member.

    Returns the temp-id -> global-id mapping for the pushing worker.
    """
    mapping = {}
    for temp_id, stats in delta.new_components:
        comp = _delta_component(pool, stats.psi, stats.count)
        pool.add(comp)
        mapping[temp_id] = comp.cid
    return mapping


def progressive_consolidate(
    pool: GlobalPool,
    deltas: list[Delta],
    spec: FamilySpec,
    rng: np.random.Generator,
) -> dict[int, dict[int, int]]:
    """One-pass absorption of deltas in order.

    Existing-component entries are added into their targets; each new
    component is merged into an existing component u with probability
    proportional to rho(S_u, S'), or appended with probability
    proportional to 1.  Returns per-worker temp-id -> global-id mappings.
    """
    mappings: dict[int, dict[int, int]] = {}
    for delta in deltas:
        absorb_existing(pool, delta)
        mapping: dict[int, int] = {}
        for temp_id, stats in delta.new_components:
            atom = _delta_component(pool, stats.psi, stats.count)
            if atom.n <= 0:
                raise ProtocolError("new component with nonpositive count")
            live = sorted(
                (c for c in pool.components.values() if c.n >= 1),
                key=lambda c: c.cid,
            )
            logw = np.array(
                [log_merge_split_ratio(c, atom, spec) for c in live] + [0.0]
            )
            w = np.exp(logw - logw.max())
            r = rng.random() * w.sum()
            u = int(np.searchsorted(np.cumsum(w), r, side="right"))
            if u < len(live):
                target = live[u]
                _merge_atom_into(pool, target, atom)
                mapping[temp_id] = target.cid
            else:
                pool.add(atom)
                mapping[temp_id] = atom.cid
        mappings[delta.worker_id] = mapping
    return mappings


def _merge_atom_into(pool: GlobalPool, target: Component, atom: Component):
    spec = pool.spec
    if target.atomic:
        # snapshot the old stats as a sub-atom under a fresh id; the pool
        # component keeps its id (its samples are all still inside it)
        old = Component(pool.new_id(), target.beta.copy(), target.kappa, target.n)
        target.subs = sorted([old, atom], key=lambda c: c.cid)
    else:
        target.subs = sorted(target.subs + [atom], key=lambda c: c.cid)
    target.beta = target.beta + (atom.beta - spec.beta0)
    target.kappa += atom.kappa - spec.kappa0
    target.n += atom.n
    if len(target.subs) > pool.subcomp_cap:
        target.subs = None


def propose_merge(
    pool: GlobalPool, spec: FamilySpec, rng: np.random.Generator
) -> tuple[int, int, float] | None:
    """Sample a distinct pair with probability proportional to rho.

    Returns (a-id, b-id, log_rho) or None when fewer than 2 components.
    """
    picked = _pick_merge_pair(pool, spec, rng, {})
    if picked is None:
        return None
    a, b, log_rho, _ = picked
    return a.cid, b.cid, log_rho


def _pair_log_rho(cache, a: Component, b: Component, spec: FamilySpec) -> float:
    key = (a.cid, b.cid) if a.cid < b.cid else (b.cid, a.cid)
    lr = cache.get(key)
    if lr is None:
        lr = log_merge_split_ratio(a, b, spec)
        cache[key] = lr
    return lr


def _pair_logsum(comps, spec, cache) -> float:
    lrs = [
        _pair_log_rho(cache, comps[i], comps[j], spec)
        for i in range(len(comps))
        for j in range(i + 1, len(comps))
    ]
    if not lrs:
        return -math.inf
    arr = np.array(lrs)
    m = arr.max()
    return m + math.log(np.exp(arr - m).sum())


def _pick_merge_pair(pool, spec, rng, cache):
    comps = sorted(
        (c for c in pool.components.values() if c.n >= 1), key=lambda c: c.cid
    )
    if len(comps) < 2:
        return None
    pairs = []
    lrs = []
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            pairs.append((comps[i], comps[j]))
            lrs.append(_pair_log_rho(cache, comps[i], comps[j], spec))
    arr = np.array(lrs)
    m = arr.max()
    w = np.exp(arr - m)
    logz = m + math.log(w.sum())
    r = rng.random() * w.sum()
    idx = int(np.searchsorted(np.cumsum(w), r, side="right"))
    idx = min(idx, len(pairs) - 1)
    a, b = pairs[idx]
    return a, b, arr[idx], logz


def _log_beta_c(comp: Component, spec: FamilySpec, cache: dict[int, float]) -> float:
    lb = cache.get(comp.cid)
    if lb is None:
        lb = single_component_log_prob(comp.subs, spec)
        cache[comp.cid] = lb
    return lb


def _split_logsum(nonatoms, spec, lb_cache) -> float:
    if not nonatoms:
        return -math.inf
    arr = np.array([-_log_beta_c(c, spec, lb_cache) for c in nonatoms])
    m = arr.max()
    return m + math.log(np.exp(arr - m).sum())


def propose_split(
    pool: GlobalPool, spec: FamilySpec, rng: np.random.Generator
) -> tuple[int, list[list[Component]], float, float] | None:
    """Pick a non-atomic component with probability proportional to
    1/beta_C and run restricted consolidation on its atoms.

    Returns (c-id, sides, log_gamma, log_beta_C); None when the pool has
    no splittable component.  A single-component outcome is returned with
    one side (a self-transition for the caller to reject).
    """
    lb_cache: dict[int, float] = {}
    nonatoms = sorted(
        (c for c in pool.components.values() if not c.atomic), key=lambda c: c.cid
    )
    if not nonatoms:
        return None
    chosen = _pick_split_target(nonatoms, spec, rng, lb_cache)
    sides, log_gamma = restricted_consolidate(chosen.subs, spec, rng)
    return chosen.cid, sides, log_gamma, lb_cache[chosen.cid]


def _pick_split_target(nonatoms, spec, rng, lb_cache) -> Component:
    arr = np.array([-_log_beta_c(c, spec, lb_cache) for c in nonatoms])
    m = arr.max()
    w = np.exp(arr - m)
    r = rng.random() * w.sum()
    idx = int(np.searchsorted(np.cumsum(w), r, side="right"))
    return nonatoms[min(idx, len(nonatoms) - 1)]


def pooled_consolidate(
    pool: GlobalPool,
    iters: int,
    spec: FamilySpec,
    rng: np.random.Generator,
) -> GlobalPool:
    """Metropolis-Hastings over the pool: each iteration proposes a merge
    or a split with equal chance and accepts per the merge-split ratio and
    the proposal transition probabilities, all in log space."""
    pair_cache: dict[tuple[int, int], float] = {}
    lb_cache: dict[int, float] = {}
    for _ in range(iters):
        if rng.random() < 0.5:
            _mh_merge_step(pool, spec, rng, pair_cache, lb_cache)
        else:
            _mh_split_step(pool, spec, rng, pair_cache, lb_cache)
    return pool


def _live_nonatoms(pool) -> list[Component]:
    return sorted(
        (c for c in pool.components.values() if not c.atomic), key=lambda c: c.cid
    )


def _mh_merge_step(pool, spec, rng, pair_cache, lb_cache):
    picked = _pick_merge_pair(pool, spec, rng, pair_cache)
    if picked is None:
        return
    a, b, log_rho, logz_pairs = picked
    cand = merge_stats(a, b, spec)
    lb_c = single_component_log_prob(cand.subs, spec)
    side1_has = cand.subs[0]
    a_atoms = {x.cid for x in a.atoms()}
    side2 = a_atoms if side1_has.cid not in a_atoms else {x.cid for x in b.atoms()}
    log_gamma = restricted_log_gamma(cand.subs, side2, spec)
    # split-proposal normalizer over the post-merge pool
    others = [c for c in _live_nonatoms(pool) if c.cid not in (a.cid, b.cid)]
    terms = [-_log_beta_c(c, spec, lb_cache) for c in others] + [-lb_c]
    arr = np.array(terms)
    m = arr.max()
    logz_split = m + math.log(np.exp(arr - m).sum())
    log_fwd = log_rho - logz_pairs
    log_rev = (-lb_c) - logz_split + log_gamma
    log_acc = log_rho + log_rev - log_fwd
    if math.log(rng.random()) < log_acc:
        cand.cid = pool.new_id()
        del pool.components[a.cid]
        del pool.components[b.cid]
        pool.record_remap(a.cid, cand.cid)
        pool.record_remap(b.cid, cand.cid)
        if len(cand.subs) > pool.subcomp_cap:
            cand.subs = None
        pool.add(cand)


def _mh_split_step(pool, spec, rng, pair_cache, lb_cache):
    nonatoms = _live_nonatoms(pool)
    if not nonatoms:
        return
    logz_split = _split_logsum(nonatoms, spec, lb_cache)
    chosen = _pick_split_target(nonatoms, spec, rng, lb_cache)
    sides, log_gamma = restricted_consolidate(chosen.subs, spec, rng)
    if len(sides) == 1:
        return  # re-formed the same component: self-transition
    part_a = component_from_atoms(sides[0], spec)
    part_b = component_from_atoms(sides[1], spec)
    log_rho = log_merge_split_ratio(part_a, part_b, spec)
    lb_c = _log_beta_c(chosen, spec, lb_cache)
    # merge-proposal normalizer over the post-split pool
    post = [c for c in pool.components.values() if c.n >= 1 and c.cid != chosen.cid]
    post.extend([part_a, part_b])
    tmp_cache: dict[tuple[int, int], float] = {}
    logz_pairs = _post_pair_logsum(post, part_a, part_b, spec, pair_cache, tmp_cache)
    log_fwd = (-lb_c) - logz_split + log_gamma
    log_rev = log_rho - logz_pairs
    log_acc = -log_rho + log_rev - log_fwd
    if math.log(rng.random()) < log_acc:
        del pool.components[chosen.cid]
        for part in (part_a, part_b):
            if part.cid not in pool.components and part.atomic and part.cid > 0 and part.n > 0 and _was_pool_atom(part):
                pool.add(part)
            else:
                part.cid = pool.new_id()
                pool.add(part)
        lb_cache.pop(chosen.cid, None)
        # labels held against the split component follow the heavier side
        survivor = max((part_a, part_b), key=lambda p: (p.n, -p.cid))
        pool.record_remap(chosen.cid, survivor.cid)


def _was_pool_atom(part: Component) -> bool:
    # single-atom sides keep their atom identity; multi-atom sides get
    # fresh ids in the caller
    return part.subs is None


def _post_pair_logsum(post, part_a, part_b, spec, pair_cache, tmp_cache):
    lrs = []
    for i in range(len(post)):
        for j in range(i + 1, len(post)):
            x, y = post[i], post[j]
            if x is part_a or x is part_b or y is part_a or y is part_b:
                key = (id(x), id(y))
                lr = tmp_cache.get(key)
                if lr is None:
                    lr = log_merge_split_ratio(x, y, spec)
                    tmp_cache[key] = lr
                lrs.append(lr)
            else:
                lrs.append(_pair_log_rho(pair_cache, x, y, spec))
    arr = np.array(lrs)
    m = arr.max()
    return m + math.log(np.exp(arr - m).sum())
