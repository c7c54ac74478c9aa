"""Attention MACs vs resolution for every attention kind, plus fitted log-log slopes."""
import argparse

from hatbench.complexity import scaling_sweep
from hatbench.reports import FLOP_COLUMNS, to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolutions", default="28,56,112,224")
    ap.add_argument("--k", type=int, default=7)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--L", type=int, default=4)
    ap.add_argument("--csv", action="store_true", help="emit every row as CSV")
    args = ap.parse_args()
    res = [int(r) for r in args.resolutions.split(",")]
    rows = []
    for kind in ("full", "window", "twins", "hat"):
        sweep = scaling_sweep(kind, res, k=args.k, d=args.d, L=args.L, instrument="meta")
        rows += [r.to_row() for r in sweep.reports]
        if not args.csv:
            macs = "  ".join(f"{r.total:.3e}" for r in sweep.reports)
            print(f"{kind:<7} slope vs H^2 = {sweep.slope:.3f}   MACs: {macs}")
    if args.csv:
        print(to_csv(rows, FLOP_COLUMNS), end="")


if __name__ == "__main__":
    main()
