"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as the
criteria complete.  The large-scale benchmark reproduction is marked slow
and deselected by default.
"""

import math
import time

import numpy as np
import pytest

from dpmm.consolidate import (
    GlobalPool,
    log_merge_split_ratio,
    pooled_consolidate,
)
from dpmm.data import gen_synthetic
from dpmm.families import (
    FamilySpec,
    PosteriorParams,
    SuffStats,
    log_marginal,
    posterior_params,
)
from dpmm.metrics import cluster_stats, variation_of_information
from dpmm.runtime import RunConfig, run
from dpmm.sampler import Delta
from dpmm.wire import (
    Ack,
    DeltaPush,
    PullRequest,
    Shutdown,
    SnapshotMsg,
    WireError,
    decode,
    encode,
)

from conftest import (
    all_documents,
    gaussian_predictive_quadrature,
    partition_log_posterior,
    polya_sequential_mass,
    set_partitions,
)
from test_consolidate import comp_from_points, prequential_log_rho


def report(num: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_1_marginal_likelihood_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_gauss = 0.0
    for _ in range(100):
        sigma = float(rng.uniform(0.3, 3.0))
        sigma0 = float(rng.uniform(0.3, 3.0))
        spec = FamilySpec("gaussian", 1, sigma=sigma, sigma0=sigma0)
        n = int(rng.integers(0, 10))
        psi = float(rng.normal(0, 3)) * n
        p = posterior_params(spec, SuffStats(np.array([psi]), n))
        # evaluate within a few predictive sd of the predictive mean so the
        # quadrature oracle retains relative accuracy
        x = float(p.beta[0] / p.kappa + rng.normal(0, 2) * sigma)
        got = math.exp(log_marginal([x], p, spec))
        want = gaussian_predictive_quadrature(x, p.beta[0], p.kappa, sigma)
        worst_gauss = max(worst_gauss, abs(got - want) / want)

    worst_multi = 0.0
    for vocab in (2, 3, 4):
        spec = FamilySpec("multinomial", vocab, gamma=float(rng.uniform(0.3, 2.0)))
        counts = rng.integers(0, 6, size=vocab).astype(float)
        p = posterior_params(spec, SuffStats(counts, 2))
        for length in (1, 2, 3):
            for doc in all_documents(vocab, length):
                got = math.exp(log_marginal(doc.astype(float), p, spec))
                want = polya_sequential_mass(doc, p.beta)
                worst_multi = max(worst_multi, abs(got - want))
    elapsed = time.perf_counter() - t0
    ok = worst_gauss <= 1e-6 and worst_multi <= 1e-10 and elapsed < 10
    report(
        1,
        ok,
        f"gaussian rel err {worst_gauss:.2e} (<=1e-6), multinomial abs err "
        f"{worst_multi:.2e} (<=1e-10), {elapsed:.1f}s (<10s)",
    )


def test_criterion_2_merge_split_ratio_oracle():
    rng = np.random.default_rng(202)
    gspec = FamilySpec("gaussian", 2, sigma=1.0, sigma0=4.0, alpha=1.5)
    mspec = FamilySpec("multinomial", 3, gamma=0.8, alpha=0.7)
    worst = 0.0
    for trial in range(200):
        if trial % 2 == 0:
            spec = gspec
            pts_a = rng.normal(rng.uniform(-4, 4), 1, (int(rng.integers(1, 31)), 2))
            pts_b = rng.normal(rng.uniform(-4, 4), 1, (int(rng.integers(1, 31)), 2))
        else:
            spec = mspec
            pts_a = rng.integers(0, 5, (int(rng.integers(1, 31)), 3)).astype(float)
            pts_b = rng.integers(0, 5, (int(rng.integers(1, 31)), 3)).astype(float)
            pts_a[pts_a.sum(axis=1) == 0, 0] = 1
            pts_b[pts_b.sum(axis=1) == 0, 0] = 1
        a = comp_from_points(pts_a, spec, 1)
        b = comp_from_points(pts_b, spec, 2)
        got = log_merge_split_ratio(a, b, spec)
        want = prequential_log_rho(list(pts_a), list(pts_b), spec)
        worst = max(worst, abs(got - want))

    unit = FamilySpec("gaussian", 1, sigma=1.0, sigma0=1.0, alpha=1.0)
    worked = log_merge_split_ratio(
        comp_from_points([[0.0]], unit, 1), comp_from_points([[0.0]], unit, 2), unit
    )
    worked_err = abs(worked - 0.5 * math.log(4.0 / 3.0))
    ok = worst <= 1e-8 and worked_err <= 1e-9
    report(
        2,
        ok,
        f"200 pairs worst |err| {worst:.2e} (<=1e-8); worked case "
        f"ln rho={worked:.6f} (0.143841)",
    )


def _partition_signature(pool: GlobalPool):
    return frozenset(
        frozenset(a.cid for a in c.atoms()) for c in pool.components.values()
    )


def _stationarity_tv(points, spec, iters, chunk, seed):
    atoms = {
        i + 1: comp_from_points([x], spec, i + 1) for i, x in enumerate(points)
    }
    target = {}
    for blocks in set_partitions(sorted(atoms)):
        sig = frozenset(frozenset(b) for b in blocks)
        target[sig] = partition_log_posterior(blocks, atoms, spec)
    logz = np.logaddexp.reduce(list(target.values()))
    target = {sig: math.exp(v - logz) for sig, v in target.items()}

    pool = GlobalPool(spec)
    for i in sorted(atoms):
        pool.add(comp_from_points(points[i - 1 : i], spec, i))
    pool._next_id = len(points) + 1
    rng = np.random.default_rng(seed)
    counts: dict = {}
    for _ in range(iters // chunk):
        pooled_consolidate(pool, chunk, spec, rng)
        sig = _partition_signature(pool)
        counts[sig] = counts.get(sig, 0) + 1
    total = sum(counts.values())
    tv = 0.5 * sum(
        abs(counts.get(sig, 0) / total - p) for sig, p in target.items()
    )
    tv += 0.5 * sum(c / total for sig, c in counts.items() if sig not in target)
    return tv, len(target)


def test_criterion_3_pooled_stationarity():
    t0 = time.perf_counter()
    spec = FamilySpec("gaussian", 1, sigma=1.0, sigma0=1.0, alpha=1.0)
    tv3, npart3 = _stationarity_tv([[0.0], [1.0], [-0.8]], spec, 200000, 10, 303)
    tv4, npart4 = _stationarity_tv([[0.0], [1.0], [-0.8], [0.4]], spec, 200000, 10, 304)
    elapsed = time.perf_counter() - t0
    ok = tv3 <= 0.05 and tv4 <= 0.05 and npart3 == 5 and npart4 == 15 and elapsed < 60
    report(
        3,
        ok,
        f"TV(3 atoms, {npart3} partitions)={tv3:.4f}, TV(4 atoms, {npart4} "
        f"partitions)={tv4:.4f} (<=0.05), {elapsed:.1f}s (<60s)",
    )


def test_criterion_4_delayed_sync_exactness():
    spec = FamilySpec("gaussian", 2, sigma=1.0, sigma0=30.0, alpha=1.0)
    ds = gen_synthetic(6, (200, 300), dim=2, sigma=1.0, seed=404, box=40.0)
    cfg = RunConfig(
        family=spec, mode="sync-prog", workers=4, iterations=1, seed=44,
        allow_new=False,
    )
    result = run(cfg, ds.observations, initial_labels=ds.truth)
    want = cluster_stats(ds.observations, result.labels, spec)
    worst = 0.0
    counts_exact = True
    for cid, (wb, wk, wn) in want.items():
        comp = result.pool.components[cid]
        counts_exact &= comp.n == wn
        worst = max(
            worst,
            float(np.abs(comp.beta - wb).max()),
            abs(comp.kappa - wk),
        )
    ok = worst <= 1e-9 and counts_exact
    report(
        4,
        ok,
        f"M=4 round vs serial recomputation: max param err {worst:.2e} "
        f"(<=1e-9), counts exact={counts_exact}",
    )


DESK_SPEC = FamilySpec("gaussian", 2, sigma=1.0, sigma0=30.0, alpha=1.0)


def _desk_run(ds, mode, seed, iters=100):
    cfg = RunConfig(
        family=DESK_SPEC,
        mode=mode,
        workers=1 if mode == "serial" else 4,
        iterations=iters,
        seed=seed,
        pooled_iters=50,
    )
    result = run(cfg, ds.observations)
    return (
        result.trace[-1].loglik,
        result.pool.live_count(),
        variation_of_information(result.labels, ds.truth),
    )


def test_criterion_5_desk_scale_convergence():
    t0 = time.perf_counter()
    # seed chosen so true means are well separated (min pairwise distance
    # ~10 sigma); near-coincident clusters make merge-vs-split ambiguous and
    # different samplers legitimately settle different posterior modes
    ds = gen_synthetic(10, (1000, 2000), dim=2, sigma=1.0, seed=5)
    seeds = list(range(10))
    serial = [_desk_run(ds, "serial", s) for s in seeds]
    serial_mean = float(np.mean([r[0] for r in serial]))
    lines = [f"N={len(ds)}, serial mean loglik {serial_mean:.1f}"]
    ok = True
    for mode in ("sync-prog", "sync-pooled", "async"):
        rows = [_desk_run(ds, mode, s) for s in seeds]
        mean_ll = float(np.mean([r[0] for r in rows]))
        ll_ok = abs(mean_ll - serial_mean) <= 0.01 * abs(serial_mean)
        vi_hits = sum(r[2] <= 0.5 for r in rows)
        k_hits = sum(8 <= r[1] <= 14 for r in rows)
        mode_ok = ll_ok and vi_hits >= 8 and k_hits >= 8
        ok &= mode_ok
        lines.append(
            f"{mode}: loglik {mean_ll:.1f} ({'ok' if ll_ok else 'off'}), "
            f"VI<=0.5 in {vi_hits}/10, K in [8,14] in {k_hits}/10"
        )
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    report(5, ok, "; ".join(lines) + f"; {elapsed:.0f}s (<600s)")


@pytest.mark.slow
def test_criterion_5_full_scale_reproduction():
    ds = gen_synthetic(50, (1000, 5000), dim=2, sigma=1.0, seed=11)
    serial_ll, serial_k, _ = _desk_run(ds, "serial", 0)
    lines = [f"N={len(ds)}, serial loglik {serial_ll:.0f} K={serial_k}"]
    ok = True
    for mode in ("sync-prog", "sync-pooled", "async"):
        ll, k, _ = _desk_run(ds, mode, 0)
        mode_ok = 45 <= k <= 60 and ll >= serial_ll - 0.001 * abs(serial_ll)
        ok &= mode_ok
        lines.append(f"{mode}: loglik {ll:.0f} K={k} ({'ok' if mode_ok else 'off'})")
    report(5, ok, "full-scale: " + "; ".join(lines))


def test_criterion_6_communication_budget():
    spec = FamilySpec("gaussian", 2, sigma=1.0, sigma0=30.0, alpha=1.0)
    iters, m = 20, 4

    def byte_count(scale):
        ds = gen_synthetic(5, (300 * scale, 300 * scale), dim=2, sigma=1.0,
                           seed=606, box=40.0)
        cfg = RunConfig(
            family=spec, mode="sync-prog", workers=m, iterations=iters,
            seed=66, allow_new=False,
        )
        result = run(cfg, ds.observations, initial_labels=ds.truth)
        return result.msgs, result.bytes

    msgs1, bytes1 = byte_count(1)
    msgs4, bytes4 = byte_count(4)
    rel = abs(bytes4 - bytes1) / bytes1
    ok = msgs1 == msgs4 == 2 * m * iters and rel <= 0.01
    report(
        6,
        ok,
        f"msgs {msgs1} and {msgs4} (= {2 * m * iters}); bytes {bytes1} vs "
        f"{bytes4} at 4x data, rel diff {rel:.4f} (<=0.01)",
    )


def test_criterion_7_desk_scale_speedup():
    spec = FamilySpec("gaussian", 2, sigma=1.0, sigma0=30.0, alpha=1.0)
    ds = gen_synthetic(10, (5700, 6300), dim=2, sigma=1.0, seed=707)

    def per_iter(mode, workers, iters=5):
        cfg = RunConfig(
            family=spec, mode=mode, workers=workers, iterations=iters, seed=7
        )
        # warm-up run compiles the jitted kernel and touches caches
        run(
            RunConfig(family=spec, mode=mode, workers=workers, iterations=1, seed=7),
            ds.observations[:2000],
        )
        t0 = time.perf_counter()
        run(cfg, ds.observations)
        return (time.perf_counter() - t0) / iters

    serial = per_iter("serial", 1)
    dist = per_iter("sync-prog", 4)
    ratio = dist / serial
    ok = ratio <= 0.4
    report(
        7,
        ok,
        f"N={len(ds)}: serial {serial * 1e3:.0f} ms/iter, M=4 "
        f"{dist * 1e3:.0f} ms/iter, ratio {ratio:.2f} (<=0.40)",
    )


def _random_message(rng):
    kind = rng.integers(0, 5)
    dim = int(rng.integers(1, 5))
    if kind == 0:
        return PullRequest(int(rng.integers(0, 2**16)), int(rng.integers(0, 2**32))), dim
    if kind == 1:
        comps = [
            (
                int(rng.integers(1, 2**32)),
                float(rng.uniform(0.1, 1e6)),
                int(rng.integers(0, 2**32)),
                bool(rng.integers(0, 2)),
                rng.normal(size=dim),
            )
            for _ in range(int(rng.integers(0, 6)))
        ]
        remap = [
            (int(rng.integers(-(2**20), 2**20)), int(rng.integers(0, 2**32)))
            for _ in range(int(rng.integers(0, 4)))
        ]
        return SnapshotMsg(int(rng.integers(0, 2**32)), remap, comps), dim
    if kind == 2:
        entries = [
            (
                int(rng.integers(1, 2**32)),
                rng.normal(size=dim),
                float(rng.normal()),
                int(rng.integers(-50, 50)),
            )
            for _ in range(int(rng.integers(0, 5)))
        ]
        new = [
            (
                -int(rng.integers(1, 100)),
                SuffStats(rng.normal(size=dim), int(rng.integers(1, 50))),
            )
            for _ in range(int(rng.integers(0, 4)))
        ]
        delta = Delta(entries, new, int(rng.integers(0, 64)), int(rng.integers(0, 2**32)))
        return DeltaPush(delta), dim
    if kind == 3:
        return Ack(int(rng.integers(0, 2**40))), dim
    return Shutdown(), dim


def _messages_equal(a, b):
    if type(a) is not type(b):
        return False
    if isinstance(a, PullRequest):
        return (a.worker_id, a.last_version) == (b.worker_id, b.last_version)
    if isinstance(a, Ack):
        return a.version == b.version
    if isinstance(a, Shutdown):
        return True
    if isinstance(a, SnapshotMsg):
        if a.version != b.version or a.remap != b.remap:
            return False
        return len(a.components) == len(b.components) and all(
            x[:4] == y[:4] and np.array_equal(x[4], y[4])
            for x, y in zip(a.components, b.components)
        )
    da, db = a.delta, b.delta
    if (da.worker_id, da.based_on_version) != (db.worker_id, db.based_on_version):
        return False
    entries_ok = len(da.entries) == len(db.entries) and all(
        x[0] == y[0]
        and np.array_equal(x[1], y[1])
        and x[2] == y[2]
        and x[3] == y[3]
        for x, y in zip(da.entries, db.entries)
    )
    new_ok = len(da.new_components) == len(db.new_components) and all(
        x[0] == y[0] and x[1].count == y[1].count and np.array_equal(x[1].psi, y[1].psi)
        for x, y in zip(da.new_components, db.new_components)
    )
    return entries_ok and new_ok


def test_criterion_8_protocol_robustness():
    rng = np.random.default_rng(808)
    for _ in range(10000):
        msg, dim = _random_message(rng)
        out = decode(encode(msg), dim)
        assert _messages_equal(msg, out)

    crashes = 0
    for i in range(100000):
        if i % 3 == 0:
            blob = rng.bytes(int(rng.integers(0, 64)))
        elif i % 3 == 1:
            frame = bytearray(encode(Ack(int(rng.integers(0, 1000)))))
            frame[int(rng.integers(0, len(frame)))] = int(rng.integers(0, 256))
            blob = bytes(frame)
        else:
            base = bytearray(
                encode(SnapshotMsg(1, [(2, 3)], [(4, 1.0, 2, True, np.ones(2))]))
            )
            for _ in range(int(rng.integers(1, 5))):
                base[int(rng.integers(0, len(base)))] = int(rng.integers(0, 256))
            blob = bytes(base)
        try:
            decode(blob, dim=2)
        except WireError:
            pass
        except Exception:
            crashes += 1
    ok = crashes == 0
    report(
        8,
        ok,
        f"10^4 round-trips exact; 10^5 fuzz decodes, {crashes} non-protocol "
        "exceptions",
    )
