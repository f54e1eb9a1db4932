#!/usr/bin/env python3
"""Run the exact-enumeration oracle suite and print per-check results."""

import argparse
import sys

from afaeval.oracle import run_oracle_suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corrupt", choices=["propensity", "q"], default=None)
    args = ap.parse_args()
    report = run_oracle_suite(args.n, args.seed, corrupt=args.corrupt)
    for c in report["checks"]:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    print(f"overall: {'PASS' if report['passed'] else 'FAIL'}")
    sys.exit(0 if report["passed"] else 3)


if __name__ == "__main__":
    main()
