"""Interval calibration on the HRS-like preset, MCMC against a Wald reference.

For each seed the MAP and inverse observed information give Wald intervals;
optionally the full sampler is run too. Prints per-coefficient coverage, the
mean and sd of Wald z-scores, and the chance that a calibrated method covers
every coefficient in at least 4 of 5 datasets.

Usage: python3 scripts/hrs_coverage.py [--seeds 0:400] [--mcmc 0:60]
"""
from __future__ import annotations

import argparse

import numpy as np
from scipy import stats

from panelmean.analysis import RunConfig, fit
from panelmean.model import PriorSpec, build_time_grid
from panelmean.sampler import find_map, observed_information
from panelmean.simulation import HRS_BETA, HRSLikeSpec, generate_hrs_like


def _range(s: str) -> range:
    a, b = (int(v) for v in s.split(":"))
    return range(a, b)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=_range, default=range(0, 400))
    ap.add_argument("--mcmc", type=_range, default=range(0, 0),
                    help="seeds for the full sampler (slow, about 8 s each)")
    args = ap.parse_args()
    beta = np.array(HRS_BETA)

    z = []
    for s in args.seeds:
        ds = generate_hrs_like(HRSLikeSpec(seed=s), np.random.default_rng(s))
        g = build_time_grid(ds)
        pr = PriorSpec.vague(ds.k, g.M)
        m = find_map(ds, g, pr)
        sd = np.sqrt(np.diag(np.linalg.inv(observed_information(ds, g, pr, m)))[:ds.k])
        z.append((m.beta - beta) / sd)
    z = np.array(z)
    cov = np.abs(z) <= stats.norm.ppf(0.975)
    print(f"Wald, {len(z)} seeds")
    print("  z mean    ", z.mean(axis=0).round(3))
    print("  z sd      ", z.std(axis=0).round(3))
    print("  coverage  ", cov.mean(axis=0).round(3), "overall", round(cov.mean(), 4))

    if len(args.mcmc):
        hits = []
        for s in args.mcmc:
            ds = generate_hrs_like(HRSLikeSpec(seed=s), np.random.default_rng(s))
            r = fit(ds, RunConfig(seed=s))
            hits.append((r.bci[:, 0] <= beta) & (beta <= r.bci[:, 1]))
        hits = np.array(hits)
        print(f"MCMC, {len(hits)} seeds")
        print("  coverage  ", hits.mean(axis=0).round(3), "overall", round(hits.mean(), 4))

    p = 0.95
    per_coef = stats.binom.sf(3, 5, p)
    print(f"P(>= 4 of 5 covered) per coefficient at nominal {p}: {per_coef:.4f}; "
          f"all {len(beta)} coefficients: {per_coef ** len(beta):.4f}")


if __name__ == "__main__":
    main()
