"""``hatbench`` command line: gradcheck, flops, params, bench, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, HatBenchError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .config import load_config
    from .hat import HatStageConfig
    from .probes import preset, stage_gradcheck

    if args.config:
        cfg = load_config(args.config)
        if not isinstance(cfg, HatStageConfig):
            raise ConfigError("gradcheck needs a stage config, not a network", "stage_config")
    else:
        cfg = preset(args.preset)
    errs = stage_gradcheck(cfg, seed=args.seed, eps=args.eps, max_entries=args.max_entries)
    worst = 0.0
    for name, e in errs.items():
        flag = "ok" if e <= args.tol else "FAIL"
        print(f"{name:<40} max_rel_err={e:.3e} {flag}")
        worst = max(worst, e)
    ok = worst <= args.tol
    print(f"{len(errs)} tensors, worst {worst:.3e}, tol {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- flops


def cmd_flops(args) -> int:
    from .complexity import report
    from .reports import FLOP_COLUMNS, to_csv, to_json

    sizes = args.sweep or [args.H]
    if not sizes or sizes[0] is None:
        return _err("give --H or --sweep")
    k = args.k if args.k is not None else (None if args.attn in ("full", "window") else 7)
    L = args.L if args.attn == "hat" else 0
    instrument = None if args.no_instrument else "meta"
    reports = [report(args.attn, H, args.d, k, L, args.heads, args.sub_ratio, instrument)
               for H in sizes]
    if args.format == "csv":
        sys.stdout.write(to_csv((r.to_row() for r in reports), FLOP_COLUMNS))
    else:
        print(to_json("flops", (r.to_dict() for r in reports)))
    return EXIT_OK


# ---------------------------------------------------------------- params


def cmd_params(args) -> int:
    from .config import load_config
    from .model import REPORTED_PARAMS_M, VariantSpec, get_variant, param_count

    if args.config:
        spec = load_config(args.config)
        if not isinstance(spec, VariantSpec):
            raise ConfigError("params needs a network config", "network_config")
    else:
        spec = get_variant(args.variant)
    if args.width_div < 1:
        raise ConfigError("--width-div must be >= 1", "width_div_positive")
    scaled = spec.scaled(args.width_div)
    total, breakdown = param_count(scaled)
    if args.format == "json":
        from .reports import to_json
        extra = {"variant": scaled.name, "total": total}
        if args.width_div == 1 and spec.name in REPORTED_PARAMS_M:
            extra["reported_M_not_asserted"] = REPORTED_PARAMS_M[spec.name]
        print(to_json("params", ({"part": k, "params": v} for k, v in breakdown.items()),
                      **extra))
        return EXIT_OK
    print(f"{scaled.name}")
    for part, n in breakdown.items():
        print(f"  {part:<8} {n:>14,}")
    print(f"  {'total':<8} {total:>14,}  ({total / 1e6:.1f}M)")
    if args.width_div == 1 and spec.name in REPORTED_PARAMS_M:
        print(f"  paper-reported (not asserted): {REPORTED_PARAMS_M[spec.name]}M")
    return EXIT_OK


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .bench import (BENCH_COLUMNS, DISCLAIMER, attention_workload, run_bench,
                        variant_workload, worker_count)
    from .model import get_variant
    from .reports import to_csv, to_json

    workers = worker_count(args.parallel)
    if args.variant:
        spec = get_variant(args.variant).scaled(args.width_div)
        cid, fn = variant_workload(spec, args.batch, args.seed, args.input_size)
    else:
        if args.H is None:
            return _err("--attn needs --H")
        cid, fn = attention_workload(args.attn, args.H, args.d, args.k, args.L, args.heads,
                                     args.sub_ratio, args.batch, args.seed)
    res = run_bench(fn, cid, args.batch, args.warmup, args.iters, workers)
    print(DISCLAIMER, file=sys.stderr if args.format != "table" else sys.stdout)
    if args.format == "csv":
        sys.stdout.write(to_csv([res.to_row()], BENCH_COLUMNS))
    elif args.format == "json":
        print(to_json("bench", [res.to_dict()]))
    else:
        print(f"{cid}: median {res.median_ns / 1e6:.3f} ms  p10 {res.p10_ns / 1e6:.3f}  "
              f"p90 {res.p90_ns / 1e6:.3f}  {res.items_per_sec:.2f} items/s "
              f"(batch {res.batch}, {res.iters} iters, {res.workers} worker(s))")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    from .verify import CHECKS, run_checks

    if args.list:
        for name in CHECKS:
            print(name)
        return EXIT_OK
    names = None if args.all or not args.only else args.only
    for n in names or ():
        if n not in CHECKS:
            return _err(f"unknown property {n!r}")
    results = run_checks(names, seed=args.seed, corrupt_byte=args.corrupt_archive_byte,
                         emit=print)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hatbench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of a HAT stage")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--config", help="JSON stage config")
    src.add_argument("--preset", default="hat-small")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--max-entries", type=int, default=None,
                   help="check a random subset of entries per tensor")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="analytical vs instrumented attention MACs")
    f.add_argument("--attn", choices=("full", "window", "hat", "twins"), required=True)
    f.add_argument("--H", type=int)
    f.add_argument("--k", type=int)
    f.add_argument("--d", type=int, default=64)
    f.add_argument("--L", type=int, default=4)
    f.add_argument("--heads", type=int, default=1)
    f.add_argument("--sub-ratio", type=int)
    f.add_argument("--sweep", type=_ints, help="comma-separated resolutions")
    f.add_argument("--format", choices=("csv", "json"), default="csv")
    f.add_argument("--no-instrument", action="store_true")
    f.set_defaults(func=cmd_flops)

    q = sub.add_parser("params", help="parameter-count breakdown")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--variant")
    src.add_argument("--config")
    q.add_argument("--width-div", type=int, default=1)
    q.add_argument("--format", choices=("table", "json"), default="table")
    q.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="wall-clock microbenchmark (CPU, f32)")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--attn", choices=("full", "window", "hat", "twins"))
    src.add_argument("--variant")
    b.add_argument("--H", type=int)
    b.add_argument("--k", type=int, default=7)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--L", type=int, default=4)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--sub-ratio", type=int)
    b.add_argument("--width-div", type=int, default=8)
    b.add_argument("--input-size", type=int)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--parallel", type=int, default=None, metavar="B",
                   help="evaluate batch items on B worker threads")
    b.add_argument("--format", choices=("table", "csv", "json"), default="table")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--all", action="store_true")
    v.add_argument("--only", nargs="+", metavar="NAME")
    v.add_argument("--list", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--corrupt-archive-byte", type=int, default=None, metavar="I",
                   help="flip byte I of the archive before the roundtrip property")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (HatBenchError, OSError) as e:
        return _err(str(e))


if __name__ == "__main__":
    sys.exit(main())
