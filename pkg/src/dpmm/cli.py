"""Command-line driver: gen / run / eval / bench.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .consolidate import ProtocolError
from .data import (
    DataError,
    Dataset,
    gen_synthetic,
    load_csv,
    load_dataset,
    load_labels,
    save_dataset,
    save_labels,
)
from .families import FamilyError, parse_family
from .metrics import variation_of_information, write_trace
from .runtime import MODES, RunConfig, TRANSPORTS, run
from .wire import WireError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4

DEFAULT_SEED = 20210616


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmm")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic Gaussian benchmark")
    g.add_argument("--clusters", type=int, required=True)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--min-size", type=int, default=1000)
    g.add_argument("--max-size", type=int, default=5000)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--box", type=float, default=50.0)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("-o", "--output", required=True)

    r = sub.add_parser("run", help="run an estimation experiment")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=MODES, default="serial")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--iters", type=int, default=100)
    r.add_argument("--sweeps-per-cycle", type=int, default=1)
    r.add_argument("--pooled-iters", type=int, default=50)
    r.add_argument("--alpha", type=float, default=1.0)
    r.add_argument("--family", required=True, help="e.g. gaussian:dim=2,sigma=1,sigma0=8")
    r.add_argument("--seed", type=int, default=DEFAULT_SEED)
    r.add_argument("--transport", choices=TRANSPORTS, default="in-process")
    r.add_argument("--listen", default="127.0.0.1:0")
    r.add_argument("--connect", default=None, help="accepted for symmetry; single-binary runs ignore it")
    r.add_argument("--trace", default=None)
    r.add_argument("--subcomp-cap", type=int, default=64)
    r.add_argument("--shuffle", action="store_true")
    r.add_argument("--include-crp", action="store_true", help="add the partition prior to reported log-likelihoods")
    r.add_argument("--repeats", type=int, default=1)
    r.add_argument("--labels-out", default=None)
    r.add_argument("--components-out", default=None)

    e = sub.add_parser("eval", help="compare two label files (VI, nats)")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)

    b = sub.add_parser("bench", help="per-iteration wall time and speedup for several worker counts")
    b.add_argument("--data", required=True)
    b.add_argument("--family", required=True)
    b.add_argument("--alpha", type=float, default=1.0)
    b.add_argument("--mode", choices=[m for m in MODES if m != "serial"], default="sync-prog")
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--workers", default="1,2,4,8")
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)

    return p


def _load_any(path: str) -> Dataset:
    if path.endswith(".csv"):
        return load_csv(path)
    return load_dataset(path)


def _cmd_gen(args) -> int:
    ds = gen_synthetic(
        args.clusters,
        (args.min_size, args.max_size),
        dim=args.dim,
        sigma=args.sigma,
        seed=args.seed,
        box=args.box,
    )
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} x {ds.dim} observations ({args.clusters} clusters) to {args.output}")
    return EXIT_OK


def _cmd_run(args) -> int:
    ds = _load_any(args.data)
    spec = parse_family(args.family, alpha=args.alpha)
    if spec.dim != ds.dim:
        raise DataError(f"family dim {spec.dim} != dataset dim {ds.dim}")
    finals = []
    for rep in range(args.repeats):
        cfg = RunConfig(
            family=spec,
            mode=args.mode,
            workers=args.workers,
            iterations=args.iters,
            sweeps_per_cycle=args.sweeps_per_cycle,
            pooled_iters=args.pooled_iters,
            seed=args.seed + rep,
            transport=args.transport,
            listen=args.listen,
            shuffle=args.shuffle,
            subcomp_cap=args.subcomp_cap,
            include_crp=args.include_crp,
        )
        result = run(cfg, ds.observations)
        final = result.trace[-1] if result.trace else None
        vi = None
        if ds.truth is not None:
            vi = variation_of_information(result.labels, ds.truth)
        finals.append((final, vi, result))
        suffix = "" if args.repeats == 1 else f".{rep}"
        if args.trace:
            write_trace(result.trace, args.trace + suffix)
        if args.labels_out:
            save_labels(result.labels, args.labels_out + suffix)
        if args.components_out:
            _dump_components(result, args.components_out + suffix)
        line = f"seed={cfg.seed} mode={cfg.mode} K={final.k if final else 0}"
        if final:
            line += f" loglik={final.loglik:.3f} msgs={final.msgs} bytes={final.bytes}"
        if vi is not None:
            line += f" VI={vi:.4f}"
        print(line)
    if args.repeats > 1:
        logliks = np.array([f.loglik for f, _, _ in finals if f])
        ks = np.array([f.k for f, _, _ in finals if f])
        print(
            f"summary: loglik {logliks.mean():.3f} +/- {logliks.std(ddof=1):.3f}, "
            f"K {ks.mean():.2f} +/- {ks.std(ddof=1):.2f}"
        )
        vis = [v for _, v, _ in finals if v is not None]
        if vis:
            vis = np.array(vis)
            print(f"summary: VI {vis.mean():.4f} +/- {vis.std(ddof=1):.4f}")
    return EXIT_OK


def _dump_components(result, path: str):
    with open(path, "w") as fh:
        fh.write("id,n,kappa,beta\n")
        for cid, comp in sorted(result.pool.components.items()):
            beta = ";".join(f"{v:.8g}" for v in comp.beta)
            fh.write(f"{cid},{comp.n},{comp.kappa:.8g},{beta}\n")


def _cmd_eval(args) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    vi = variation_of_information(pred, truth)
    print(f"VI={vi:.6f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    ds = _load_any(args.data)
    spec = parse_family(args.family, alpha=args.alpha)
    worker_counts = [int(w) for w in args.workers.split(",")]
    base = None
    print("workers,sec_per_iter,speedup")
    for m in [0] + worker_counts:
        mode = "serial" if m == 0 else args.mode
        cfg = RunConfig(
            family=spec,
            mode=mode,
            workers=max(1, m),
            iterations=args.iters,
            seed=args.seed,
        )
        t0 = time.perf_counter()
        run(cfg, ds.observations)
        per_iter = (time.perf_counter() - t0) / max(1, args.iters)
        if m == 0:
            base = per_iter
            print(f"serial,{per_iter:.4f},1.00")
        else:
            print(f"{m},{per_iter:.4f},{base / per_iter:.2f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        if args.cmd == "gen":
            return _cmd_gen(args)
        if args.cmd == "run":
            return _cmd_run(args)
        if args.cmd == "eval":
            return _cmd_eval(args)
        if args.cmd == "bench":
            return _cmd_bench(args)
        return EXIT_USAGE
    except (DataError, FamilyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ProtocolError, WireError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
