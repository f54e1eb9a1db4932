#!/usr/bin/env python3
"""Run the MAR synthetic experiment with the shipped config."""

import argparse
from pathlib import Path

from afaeval.harness import ExperimentConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/synthetic_mar")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    help="config override: dotted.key=value")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_file(
        ROOT / "configs" / "synthetic_mar.json", args.overrides
    )
    out = run_experiment(cfg, args.out)
    print(f"artifacts written to {out}")


if __name__ == "__main__":
    main()
