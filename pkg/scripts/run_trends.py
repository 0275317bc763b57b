"""Train the toy-corpus model variants and print an EER/minDCF table.

    python scripts/run_trends.py --corpus runs/toy --out runs/trends [--only moco-wavaug ...] [--seeds 0 1 2]
"""
from __future__ import annotations

import argparse
import logging

from spkcon.trends import VARIANTS, ToyBench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--corpus", default="runs/toy", help="generated here if missing")
    ap.add_argument("--out", default="runs/trends")
    ap.add_argument("--only", nargs="*", default=None, choices=sorted(VARIANTS))
    ap.add_argument("--seeds", nargs="*", type=int, default=[0])
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    bench = ToyBench(args.corpus)
    over = {"train_epochs": args.epochs} if args.epochs else {}
    rows = [("untrained", s, bench.untrained_eer(s), float("nan"), 0.0) for s in args.seeds]
    for name in args.only or VARIANTS:
        for seed in args.seeds:
            r = bench.run(name, args.out, seed, **over)
            rows.append((name, seed, r.eer, r.report["min_dcf"], r.seconds))
            print(f"{name:<20} seed {seed}  EER {100 * r.eer:6.2f}%  minDCF {r.report['min_dcf']:.4f}"
                  f"  ({r.seconds:.0f}s)", flush=True)
    print()
    print(f"{'system':<20} {'seed':>4} {'EER (%)':>8} {'minDCF':>8} {'time (s)':>9}")
    for name, seed, e, dcf, secs in rows:
        print(f"{name:<20} {seed:>4} {100 * e:8.2f} {dcf:8.4f} {secs:9.0f}")


if __name__ == "__main__":
    main()
