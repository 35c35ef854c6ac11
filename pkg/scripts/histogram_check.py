#!/usr/bin/env python3
"""Print the equal-probability histograms of prior and implicit samples for one static problem."""

import argparse
import math

import numpy as np

from ipf import implicit_sampler as isam
from ipf.oracle_diagnostics import build_quadrature, rn_histogram
from ipf.sde_model import OBSERVATIONS


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--obs", choices=sorted(OBSERVATIONS), default="cubic")
    ap.add_argument("--b", type=float, default=1.5)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--s", type=float, default=0.1)
    ap.add_argument("-L", type=int, default=10_000)
    ap.add_argument("-K", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    obj = isam.static_objective(OBSERVATIONS[args.obs](args.s), args.b, args.sigma)
    q = build_quadrature(obj)
    rng = np.random.default_rng(args.seed)
    prior = math.sqrt(args.sigma) * rng.standard_normal(args.L)
    sol = isam.sample(obj, rng.standard_normal((args.L, 1)))
    pos = sol.position[:, 0]
    hs = rn_histogram(prior, q=q, K=args.K)
    hi = rn_histogram(pos, q=q, K=args.K)
    hw = rn_histogram(pos, np.exp(sol.log_weight - sol.log_weight.max()), q=q, K=args.K)
    print(f"posterior mean {q.mean():.5f}, proposal {sol.method}")
    print(" k  standard  implicit  weighted")
    for k, row in enumerate(zip(hs.frequencies, hi.frequencies, hw.frequencies), start=1):
        print(f"{k:2d}  " + "  ".join(f"{v:8.3f}" for v in row))
    print(f"chi2: standard {hs.chi2():.1f}, implicit {hi.chi2():.1f}")


if __name__ == "__main__":
    main()
