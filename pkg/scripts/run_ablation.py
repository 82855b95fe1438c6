"""Trigger kind x perturbation kind ablation at the default configuration.

Usage: python3 scripts/run_ablation.py [--out runs/ablation] [--seed 0] [--cache DIR]
"""
import argparse
import logging
from pathlib import Path

from vidbackdoor.harness import TRIGGER_KINDS_ORDER, ExperimentConfig, StageCache, ablation_grid, emit_report, run_pipeline

PERTURB_KINDS = ("none", "targeted", "uniform")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cache = StageCache(args.cache)
    base = ExperimentConfig(seed=args.seed)
    results = []
    for tk in TRIGGER_KINDS_ORDER:
        for pk in PERTURB_KINDS:
            cfg = base.replace(**{"trigger.kind": tk, "perturb.kind": pk, "out_dir": str(args.out / f"{tk}_{pk}")})
            results.append(run_pipeline(cfg, cache))
            logging.info("%s/%s ASR %.4f", tk, pk, results[-1].asr)
    text, _ = emit_report(results, args.out)
    grid = ablation_grid(results)
    (args.out / "ablation.txt").write_text(grid)
    print(text)
    print(grid)


if __name__ == "__main__":
    main()
