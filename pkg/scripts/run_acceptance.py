#!/usr/bin/env python3
"""Run the acceptance criteria and write a consolidated JSON report."""
import argparse
import json
import sys

from exitbsde.acceptance import run_all


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--criteria", type=int, nargs="*", help="subset, e.g. 1 2 5 (default: all)")
    ap.add_argument("--scale", choices=("full", "quick"), default="full")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="acceptance.json")
    args = ap.parse_args()
    results = run_all(args.criteria, args.scale, args.threads)
    for r in results:
        print(r.line())
    with open(args.out, "w") as fh:
        json.dump({"scale": args.scale, "results": [r.to_dict() for r in results]}, fh, indent=1,
                  default=str)
    return 0 if all(r.passed for r in results) else 4


if __name__ == "__main__":
    sys.exit(main())
