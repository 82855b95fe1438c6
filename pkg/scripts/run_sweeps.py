"""Trigger-size and poison-percentage sweeps with CSV and SVG outputs.

Usage: python3 scripts/run_sweeps.py [--out runs/sweeps] [--repeats 1] [--axis trigger_size|poison_pct]
"""
import argparse
import logging
from pathlib import Path

from vidbackdoor.harness import DEFAULT_POISON_PCTS, DEFAULT_TRIGGER_SIZES, ExperimentConfig, StageCache, sweep

AXES = {"trigger_size": DEFAULT_TRIGGER_SIZES, "poison_pct": DEFAULT_POISON_PCTS}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--axis", choices=sorted(AXES), action="append")
    ap.add_argument("--cache", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cache = StageCache(args.cache)
    for axis in args.axis or sorted(AXES):
        cfg = ExperimentConfig(seed=args.seed, out_dir=str(args.out / axis))
        _, text = sweep(cfg, axis, AXES[axis], repeats=args.repeats, cache=cache)
        print(f"# {axis}\n{text}")


if __name__ == "__main__":
    main()
