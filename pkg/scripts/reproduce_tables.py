#!/usr/bin/env python3
"""Run every registered experiment and write its CSVs under one directory.

    python3 scripts/reproduce_tables.py --out results --fast
"""

import argparse
import time

from ipf.experiments import EXPERIMENTS, resolve_params, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fast", action="store_true")
    ap.add_argument("names", nargs="*", help="subset of experiments (default: all)")
    args = ap.parse_args()
    for name in args.names or list(EXPERIMENTS):
        t0 = time.time()
        run_experiment(name, resolve_params(name, fast=args.fast), args.seed, args.out)
        print(f"{name:12s} {time.time() - t0:7.1f} s")


if __name__ == "__main__":
    main()
