#!/usr/bin/env python3
"""Sensitivity of the bridge-refined exit reference to the refinement factor R.

At a fixed coarse h, the exit-time error E|tau_ref - tau_bar| should settle
as R grows; the spread across R bounds the proxy error of the reference.
"""
import argparse

from exitbsde.problems import get_problem
from exitbsde.simulate import exit_statistics, refine_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--problem", default="P1")
    ap.add_argument("--h", type=float, default=2.0**-5)
    ap.add_argument("--n-paths", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    prob = get_problem(args.problem)
    x0 = [0.0] * prob.dim
    print("R,exit_error_p1,se,space_error,se,tau_ref_mean")
    for R in (4, 8, 16, 32, 64, 128, 256):
        t = exit_statistics(refine_batch(prob, x0, args.h, R, args.n_paths, args.seed, threads=args.threads), (1,))
        e, es = t.rows["exit_error_p1"]
        s, ss = t.rows["space_error"]
        print(f"{R},{e:.6g},{es:.2g},{s:.6g},{ss:.2g},{t.rows['tau_ref'][0]:.6g}")


if __name__ == "__main__":
    main()
