"""Default attack followed by all three defenses; prints the defense summaries.

Usage: python3 scripts/run_defenses.py [--out runs/defenses] [--seed 0] [--retrain]
"""
import argparse
import json
import logging
from pathlib import Path

from vidbackdoor.harness import ExperimentConfig, StageCache, emit_report, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/defenses"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--retrain", action="store_true", help="retrain on the spectrally filtered set")
    ap.add_argument("--cache", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(seed=args.seed, out_dir=str(args.out), defenses=["spectral", "cleanse", "augment"])
    cfg = cfg.replace(**{"defense_params.retrain_after_filter": args.retrain})
    res = run_pipeline(cfg, StageCache(args.cache))
    text, _ = emit_report([res], args.out)
    print(text)
    rep = dict(res.defense_reports)
    rep["spectral"] = {k: v for k, v in rep["spectral"].items() if k != "scores"}
    print(json.dumps(rep, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
