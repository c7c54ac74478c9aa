"""Wall-clock comparison of HAT and dense attention at one stage geometry."""
import argparse

from hatbench.bench import DISCLAIMER, attention_workload, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--H", type=int, default=56)
    ap.add_argument("--k", type=int, default=7)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--L", type=int, default=4)
    ap.add_argument("--iters", type=int, default=5)
    args = ap.parse_args()
    print(DISCLAIMER)
    results = {}
    for kind in ("full", "window", "hat"):
        cid, fn = attention_workload(kind, args.H, args.d, args.k, args.L, heads=2)
        r = run_bench(fn, cid, warmup=1, iters=args.iters)
        results[kind] = r.items_per_sec
        print(f"{cid:<28} median {r.median_ns / 1e6:9.2f} ms   {r.items_per_sec:8.2f} items/s")
    print(f"hat / full throughput: {results['hat'] / results['full']:.2f}x")


if __name__ == "__main__":
    main()
