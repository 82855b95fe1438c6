"""Command line entry point: ``vidbackdoor <subcommand> [--config C] [--seed S] [--out DIR] [--quiet]``.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import (TriggerMask, build_poisoned_dataset, load_trigger, pgd_perturb_frames, save_trigger,
                     select_poison_ids)
from .defense import augmentation_resistance, run_cleanse, run_spectral
from .harness import (DEFAULT_POISON_PCTS, DEFAULT_TRIGGER_SIZES, ConfigError, ExperimentConfig, StageCache,
                      StageError, _make_dataset, emit_report, load_config, load_result, make_trigger, run_pipeline,
                      sweep, train_model)
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint, train
from .videodata import VideoDataset, load_dataset, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
log = logging.getLogger("vidbackdoor")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="ExperimentConfig JSON")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--cache", type=Path, help="directory for memoised models and triggers")
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="vidbackdoor", parents=[g], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[g], help="generate the MovingShapes dataset")

    p = sub.add_parser("train", parents=[g], help="train a model on a dataset")
    p.add_argument("--data", type=Path, help="dataset file (default: generate from config)")
    p.add_argument("--name", default="model.vbm")

    p = sub.add_parser("gen-trigger", parents=[g], help="generate a trigger against a clean model")
    p.add_argument("--data", type=Path)
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("perturb", parents=[g], help="PGD-perturb the selected target-class videos")
    p.add_argument("--data", type=Path)
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("poison", parents=[g], help="assemble the poisoned training set")
    p.add_argument("--data", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--trigger", type=Path, required=True)

    sub.add_parser("attack", parents=[g], help="run the full pipeline and write result.json")

    p = sub.add_parser("sweep", parents=[g], help="sweep trigger size or poisoning percentage")
    p.add_argument("--axis", choices=["trigger_size", "poison_pct"], required=True)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("defend", parents=[g], help="run a defense")
    p.add_argument("defense", choices=["spectral", "cleanse", "augment"])
    p.add_argument("--data", type=Path, help="(poisoned) dataset file")
    p.add_argument("--model", type=Path, help="infected model checkpoint")
    p.add_argument("--poison-ids", type=Path, help="JSON list of poisoned sample ids")
    p.add_argument("--trigger", type=Path)

    p = sub.add_parser("report", parents=[g], help="tabulate result.json files")
    p.add_argument("results", type=Path, nargs="+", help="result.json files or run directories")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    cfg.validate()
    return cfg


def _data(args, cfg) -> VideoDataset:
    return load_dataset(args.data) if getattr(args, "data", None) else _make_dataset(cfg)


def _spec(cfg: ExperimentConfig, data: VideoDataset) -> ModelSpec:
    return ModelSpec(cfg.model.arch, tuple(data.dims), data.class_count, cfg.sub_seed("model"))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2))


def run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = StageCache(args.cache)
    cmd = args.command
    stage = cmd
    try:
        if cmd == "gen-data":
            data = _make_dataset(cfg)
            save_dataset(data, out / "dataset.vbl")
            log.info("wrote %s (%d train / %d test)", out / "dataset.vbl", len(data.train), len(data.test))
        elif cmd == "train":
            data = _data(args, cfg)
            model = build_model(_spec(cfg, data))
            rep = train(model, data, cfg.train_config(),
                        on_epoch=lambda e, l: log.info("epoch %d loss %.5f", e, l))
            save_checkpoint(model, out / args.name)
            _dump(out / (Path(args.name).stem + "_report.json"),
                  {"losses": rep.losses, "test_accuracy": rep.test_accuracy})
            log.info("test accuracy %.4f", rep.test_accuracy)
        elif cmd == "gen-trigger":
            data = _data(args, cfg)
            model = load_checkpoint(args.model)
            mask = TriggerMask.bottom_right(cfg.trigger.size, data.dims)
            trig = make_trigger(cfg, model, data, mask, cache)
            save_trigger(trig, out / "trigger.vbt")
        elif cmd == "perturb":
            data = _data(args, cfg)
            model = load_checkpoint(args.model)
            plan = cfg.poison_plan()
            ids = select_poison_ids(data.train, plan)
            pos = np.flatnonzero(np.isin(data.train.ids, ids))
            train_split = data.train.copy()
            train_split.frames[pos] = pgd_perturb_frames(model, train_split.frames[pos], train_split.labels[pos],
                                                         plan.perturb)
            save_dataset(data.replace_train(train_split), out / "perturbed_dataset.vbl")
            _dump(out / "perturbed_ids.json", [int(i) for i in ids])
        elif cmd == "poison":
            data = _data(args, cfg)
            model = load_checkpoint(args.model)
            trig = load_trigger(args.trigger)
            mask = TriggerMask.bottom_right(trig.w, data.dims)
            poisoned, ids = build_poisoned_dataset(data, model, cfg.poison_plan(), trig, mask)
            save_dataset(poisoned, out / "poisoned_dataset.vbl")
            _dump(out / "poison_ids.json", [int(i) for i in ids])
        elif cmd == "attack":
            res = run_pipeline(cfg, cache)
            log.info("clean acc %.4f / infected acc %.4f / ASR %.4f", res.clean_accuracy_clean_model,
                     res.clean_accuracy_infected_model, res.asr)
        elif cmd == "sweep":
            values = args.values or (DEFAULT_TRIGGER_SIZES if args.axis == "trigger_size" else DEFAULT_POISON_PCTS)
            results, text = sweep(cfg, args.axis, values, args.repeats, cache)
            if not args.quiet:
                sys.stdout.write(text)
        elif cmd == "defend":
            _defend(args, cfg, out, cache)
        elif cmd == "report":
            results = [load_result(p) for p in args.results]
            text, _ = emit_report(results, out)
            if not args.quiet:
                sys.stdout.write(text)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a stage failure
        (out / "FAILED").write_text(f"{stage}\n{type(exc).__name__}: {exc}\n")
        log.error("stage %s failed: %s", stage, exc)
        return EXIT_STAGE
    return EXIT_OK


def _defend(args, cfg: ExperimentConfig, out: Path, cache: StageCache) -> None:
    data = _data(args, cfg)
    target = cfg.poison.target_class
    dp = cfg.defense_params
    if args.defense == "spectral":
        if not (args.model and args.poison_ids):
            raise ConfigError("defend spectral needs --model and --poison-ids")
        ids = json.loads(args.poison_ids.read_text())
        rep = run_spectral(load_checkpoint(args.model), data, target, ids, multiplier=dp.spectral_multiplier)
        _dump(out / "spectral.json", rep.to_json())
    elif args.defense == "cleanse":
        if not args.model:
            raise ConfigError("defend cleanse needs --model")
        rep, rev = run_cleanse(load_checkpoint(args.model), data, dp.cleanse_lambda, dp.cleanse_steps, dp.cleanse_lr,
                               dp.cleanse_probes_per_class, cfg.sub_seed("defense"))
        _dump(out / "cleanse.json", rep.to_json())
        for r in rev:
            save_trigger(r.as_trigger(data.dims, cfg.sub_seed("defense")), out / f"reversed_class{r.target_class}.vbt")
    else:
        if not args.trigger:
            raise ConfigError("defend augment needs --trigger")
        trig = load_trigger(args.trigger)
        mask = TriggerMask.bottom_right(trig.w, data.dims)
        spec = _spec(cfg, data)
        rep = augmentation_resistance(data, spec, cfg.train_config(), trig, mask, target,
                                      train_fn=lambda ds, c: train_model(spec, ds, c, cache))
        _dump(out / "augment.json", rep.to_json())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
