#!/usr/bin/env python3
"""Boundary and dynamical loss rates of U = u on every shipped problem, unweighted and weighted."""
import argparse

from exitbsde.loss import ExpExitClamped, Unit
from exitbsde.problems import get_problem
from exitbsde.rates import DEFAULT_H_LIST, write_long_csv, run_rate_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-paths", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--h-min-exp", type=int, default=8, help="finest stepsize is 2^-this")
    ap.add_argument("--out", default="loss_rates_long.csv")
    args = ap.parse_args()
    hs = [h for h in DEFAULT_H_LIST if h >= 2.0**-args.h_min_exp]
    tables = []
    for name in ("P1", "P2", "P3", "P4"):
        prob = get_problem(name)
        for weight in (Unit(), ExpExitClamped(0.5, 3.0)):
            for q in ("boundary", "dynamical"):
                t = run_rate_study(prob, prob.exact_solution, weight, hs, args.n_paths, "uniform", args.seed, q,
                                   threads=args.threads)
                t.quantity = f"{name}/{weight.to_dict()['type']}/{q}"
                tables.append(t)
                slope = "n/a" if t.slope is None else f"{t.slope:.3f}"
                print(f"{t.quantity:40s} slope {slope:>7s}  target {t.target_exponent:<6g} {t.verdict}")
    write_long_csv(tables, args.out)


if __name__ == "__main__":
    main()
