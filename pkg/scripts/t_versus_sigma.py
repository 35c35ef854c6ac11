#!/usr/bin/env python3
"""Mean of the increment statistic T as a function of the trial noise level.

The identification iteration seeks the zero crossing of this curve.  Each
point averages one filter run on each of ``--datasets`` synthetic data sets.
"""

import argparse
import csv

import numpy as np

from ipf.param_ident import RmConfig, expected_T
from ipf.sde_model import generate_synthetic, linear_obs, zero_drift


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigma-star", type=float, default=0.01)
    ap.add_argument("--datasets", type=int, default=40)
    ap.add_argument("--out", default="t_versus_sigma.csv")
    args = ap.parse_args()
    template = zero_drift(1, args.sigma_star, 0.01)
    obs = linear_obs(1e-4)
    data = [generate_synthetic(template, obs, np.zeros(1), 100, k)[1] for k in range(args.datasets)]
    cfg = RmConfig(args.sigma_star)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma_over_sigma_star", "mean_T", "se"])
        for f in np.geomspace(0.1, 10, 11):
            m, se = expected_T(template, obs, data, cfg, f * args.sigma_star)
            w.writerow([f, m, se])
            print(f"{f:7.3f}  {m:+.3f} +- {se:.3f}")


if __name__ == "__main__":
    main()
