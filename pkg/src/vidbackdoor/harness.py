"""Experiment orchestration: configs, the attack pipeline, sweeps and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .attack import (TRIGGER_KINDS, TRIGGER_VERSION, PerturbConfig, PoisonPlan, TriggerGenConfig, TriggerMask,
                     TriggerPattern, baseline_trigger, build_poisoned_dataset, generate_universal_trigger,
                     load_trigger, save_trigger)
from .defense import augmentation_resistance, run_cleanse, run_spectral
from .metrics import asr_from_predictions, compute_asr
from .models import (CHECKPOINT_VERSION, ModelSpec, TrainConfig, VideoModel, build_model, evaluate_accuracy,
                     load_checkpoint, save_checkpoint, train)
from .videodata import (FORMAT_VERSION, ShapeClassSpec, VideoDataset, generate_dataset, load_dataset,
                        save_dataset)

log = logging.getLogger(__name__)

__all__ = ["DataConfig", "ExperimentConfig", "RunResult", "StageError", "StageCache", "compute_asr",
           "asr_from_predictions", "run_pipeline", "sweep", "emit_report", "ablation_grid"]

# sub_seed = master XOR stage index
STAGE_INDEX = {"data": 0, "model": 1, "train": 2, "trigger": 3, "poison": 4, "defense": 5}
DEFENSES = ("spectral", "cleanse", "augment")
SWEEP_AXES = ("trigger_size", "poison_pct")
DEFAULT_TRIGGER_SIZES = (2, 3, 4, 6, 8)
DEFAULT_POISON_PCTS = (0.1, 0.2, 0.3, 0.5, 0.7, 1.0)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class DataConfig:
    path: str | None = None
    classes: list[dict] | None = None
    per_class_train: int = 100
    per_class_test: int = 40
    dims: tuple[int, int, int, int] = (16, 32, 32, 3)
    noise_std: float = 0.1


@dataclass
class ModelConfig:
    arch: str = "conv3d_small"


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    augment: bool = False


@dataclass
class TriggerSettings:
    kind: str = "universal"
    size: int = 4
    steps: int = 2000
    step_size: float = 1 / 255
    batch_size: int = 10


@dataclass
class PerturbSettings:
    kind: str = "targeted"
    epsilon: float = 16 / 255
    steps: int = 40
    step_size: float | None = None


@dataclass
class PoisonSettings:
    target_class: int = 0
    fraction: float = 0.3


@dataclass
class DefenseSettings:
    spectral_multiplier: float = 1.0
    retrain_after_filter: bool = False
    cleanse_lambda: float = 1e-3
    cleanse_steps: int = 100
    cleanse_lr: float = 1.0
    cleanse_probes_per_class: int = 5


@dataclass
class ExperimentConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    trigger: TriggerSettings = field(default_factory=TriggerSettings)
    perturb: PerturbSettings = field(default_factory=PerturbSettings)
    poison: PoisonSettings = field(default_factory=PoisonSettings)
    defenses: list[str] = field(default_factory=list)
    defense_params: DefenseSettings = field(default_factory=DefenseSettings)
    out_dir: str = "runs/default"
    seed: int = 0

    def sub_seed(self, stage: str) -> int:
        return int(self.seed) ^ STAGE_INDEX[stage]

    def validate(self) -> None:
        if self.trigger.kind not in TRIGGER_KINDS:
            raise ConfigError(f"trigger.kind must be one of {TRIGGER_KINDS}")
        bad = [d for d in self.defenses if d not in DEFENSES]
        if bad:
            raise ConfigError(f"unknown defenses {bad}; expected a subset of {DEFENSES}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.perturb_config()
            self.poison_plan()
            self.trigger_config()
            self.train_config()
            ModelSpec(self.model.arch, tuple(self.dataset.dims), self.class_count(), 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def class_count(self) -> int:
        return len(self.dataset.classes) if self.dataset.classes else 5

    def train_config(self, augment: bool | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.momentum, self.sub_seed("train"),
                           t.augment if augment is None else augment)

    def trigger_config(self) -> TriggerGenConfig:
        t = self.trigger
        return TriggerGenConfig(t.steps, t.step_size, t.batch_size, t.size, self.poison.target_class,
                                self.sub_seed("trigger"))

    def perturb_config(self) -> PerturbConfig:
        p = self.perturb
        return PerturbConfig(p.kind, p.epsilon, p.steps, p.step_size)

    def poison_plan(self) -> PoisonPlan:
        return PoisonPlan(self.poison.target_class, self.poison.fraction, self.perturb_config(),
                          self.sub_seed("poison"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["dims"] = list(self.dataset.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        parts = {"dataset": DataConfig, "model": ModelConfig, "train": TrainSettings, "trigger": TriggerSettings,
                 "perturb": PerturbSettings, "poison": PoisonSettings, "defense_params": DefenseSettings}
        kw: dict[str, Any] = {}
        for name, value in d.items():
            if name in parts:
                sub_known = {f.name for f in dataclasses.fields(parts[name])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown fields in {name}: {sorted(bad)}")
                kw[name] = parts[name](**value)
            else:
                kw[name] = value
        cfg = cls(**kw)
        cfg.dataset.dims = tuple(cfg.dataset.dims)
        cfg.defenses = list(cfg.defenses)
        return cfg

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"poison.fraction": 0.5})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *head, leaf = path.split(".")
            for k in head:
                node = node[k]
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class RunResult:
    clean_accuracy_clean_model: float
    clean_accuracy_infected_model: float
    asr: float
    trigger_loss_summary: dict | None
    defense_reports: dict
    config: dict
    versions: dict
    wall_clock_seconds: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    def payload(self) -> str:
        """Canonical JSON text without the wall-clock field."""
        d = self.to_json()
        d.pop("wall_clock_seconds")
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        return cls(**d)


def versions() -> dict:
    return {"code": __version__, "dataset_format": FORMAT_VERSION, "checkpoint_format": CHECKPOINT_VERSION,
            "trigger_format": TRIGGER_VERSION}


# --------------------------------------------------------------------------- #
# stage cache


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:24]


class StageCache:
    """Memoises datasets, models and triggers by content key; optionally mirrored to disk."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else None
        self._mem: dict[str, Any] = {}
        self.hits: list[str] = []
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def get(self, kind: str, key: str, compute: Callable[[], Any]):
        full = f"{kind}-{key}"
        if full in self._mem:
            self.hits.append(full)
            return self._mem[full]
        path = self._path(kind, key)
        if path is not None and path.exists():
            value = {"model": load_checkpoint, "trigger": load_trigger}[kind](path)
            self.hits.append(full)
        else:
            value = compute()
            if path is not None:
                {"model": save_checkpoint, "trigger": save_trigger}[kind](value, path)
        self._mem[full] = value
        return value

    def _path(self, kind: str, key: str) -> Path | None:
        if self.root is None or kind not in ("model", "trigger"):
            return None
        return self.root / f"{kind}-{key}.{'vbm' if kind == 'model' else 'vbt'}"


def _trigger_summary(trigger: TriggerPattern) -> dict | None:
    tr = trigger.loss_trace
    if tr.size == 0:
        return None
    tail = tr[-min(100, tr.size):]
    return {"steps": int(tr.size), "first": float(tr[0]), "last": float(tr[-1]), "min": float(tr.min()),
            "mean_last_100": float(tail.mean())}


# --------------------------------------------------------------------------- #
# pipeline


def _make_dataset(cfg: ExperimentConfig) -> VideoDataset:
    d = cfg.dataset
    if d.path:
        return load_dataset(d.path)
    specs = [ShapeClassSpec.from_dict(c) for c in d.classes] if d.classes else None
    return generate_dataset(specs, d.per_class_train, d.per_class_test, d.dims, d.noise_std, cfg.sub_seed("data"))


def train_model(spec: ModelSpec, dataset: VideoDataset, tcfg: TrainConfig, cache: StageCache) -> VideoModel:
    def compute():
        m = build_model(spec)
        train(m, dataset, tcfg)
        return m

    return cache.get("model", _key("model", spec.to_dict(), asdict(tcfg), dataset.digest()), compute)


def make_trigger(cfg: ExperimentConfig, clean: VideoModel, dataset: VideoDataset, mask: TriggerMask,
                 cache: StageCache) -> TriggerPattern:
    t = cfg.trigger
    T, C = dataset.dims[0], dataset.dims[3]
    if t.kind == "universal":
        tc = cfg.trigger_config()
        return cache.get("trigger", _key("trigger", asdict(tc), clean.digest(), dataset.digest()),
                         lambda: generate_universal_trigger(clean, dataset, tc, mask))
    trig = baseline_trigger(t.kind, t.size, T, C, cfg.sub_seed("trigger"))
    trig.target_class = cfg.poison.target_class
    return trig


def run_pipeline(cfg: ExperimentConfig, cache: StageCache | None = None, persist: bool = True) -> RunResult:
    """data -> clean model -> trigger -> PGD + poison -> infected model -> ASR -> defenses.

    Artifacts and ``result.json`` go to ``cfg.out_dir`` when ``persist`` is set.
    A failing stage raises StageError and leaves a FAILED marker beside the artifacts.
    """
    cfg.validate()
    cache = cache or StageCache()
    out = Path(cfg.out_dir)
    if persist:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").unlink(missing_ok=True)
    start = time.perf_counter()
    stage = "data"
    try:
        data = _make_dataset(cfg)
        dims = tuple(data.dims)
        if persist:
            save_dataset(data, out / "dataset.vbl")
        spec = ModelSpec(cfg.model.arch, dims, data.class_count, cfg.sub_seed("model"))
        tcfg = cfg.train_config()

        stage = "train_clean"
        log.info("training clean model")
        clean = train_model(spec, data, tcfg, cache)
        clean_acc = evaluate_accuracy(clean, data.test)
        if persist:
            save_checkpoint(clean, out / "clean_model.vbm")

        stage = "trigger"
        mask = TriggerMask.bottom_right(cfg.trigger.size, dims)
        mask.check(dims)
        trigger = make_trigger(cfg, clean, data, mask, cache)
        if persist:
            save_trigger(trigger, out / "trigger.vbt")

        stage = "poison"
        plan = cfg.poison_plan()
        poisoned, poison_ids = build_poisoned_dataset(data, clean, plan, trigger, mask)
        if persist:
            save_dataset(poisoned, out / "poisoned_dataset.vbl")
            (out / "poison_ids.json").write_text(json.dumps([int(i) for i in poison_ids]))

        stage = "train_infected"
        infected = train_model(spec, poisoned, tcfg, cache)
        if persist:
            save_checkpoint(infected, out / "infected_model.vbm")

        stage = "evaluate"
        infected_acc = evaluate_accuracy(infected, poisoned.test)
        asr = compute_asr(infected, poisoned.test, trigger, mask, plan.target_class)

        reports: dict[str, Any] = {}
        dp = cfg.defense_params
        if "spectral" in cfg.defenses:
            stage = "defend_spectral"
            rep = run_spectral(infected, poisoned, plan.target_class, poison_ids, multiplier=dp.spectral_multiplier)
            reports["spectral"] = rep.to_json()
            if dp.retrain_after_filter:
                keep = ~np.isin(poisoned.train.ids, rep.removed_ids)
                purified = poisoned.replace_train(poisoned.train.subset(keep))
                retrained = train_model(spec, purified, tcfg, cache)
                reports["spectral"]["retrained"] = {
                    "clean_accuracy": evaluate_accuracy(retrained, purified.test),
                    "asr": compute_asr(retrained, purified.test, trigger, mask, plan.target_class)}
        if "cleanse" in cfg.defenses:
            stage = "defend_cleanse"
            crep, rev = run_cleanse(infected, poisoned, dp.cleanse_lambda, dp.cleanse_steps, dp.cleanse_lr,
                                    dp.cleanse_probes_per_class, cfg.sub_seed("defense"))
            reports["cleanse"] = crep.to_json()
            if persist:
                for r in rev:
                    save_trigger(r.as_trigger(dims, cfg.sub_seed("defense")), out / f"reversed_class{r.target_class}.vbt")
        if "augment" in cfg.defenses:
            stage = "defend_augment"
            arep = augmentation_resistance(poisoned, spec, tcfg, trigger, mask, plan.target_class,
                                           train_fn=lambda ds, c: train_model(spec, ds, c, cache))
            reports["augment"] = arep.to_json()
    except Exception as exc:
        if persist:
            (out / "FAILED").write_text(f"{stage}\n{type(exc).__name__}: {exc}\n")
        raise StageError(stage, exc) from exc

    result = RunResult(clean_acc, infected_acc, asr, _trigger_summary(trigger), reports, cfg.to_dict(), versions(),
                       time.perf_counter() - start)
    if persist:
        (out / "result.json").write_text(json.dumps(result.to_json(), sort_keys=True, indent=2))
    return result


def load_result(path: str | Path) -> RunResult:
    p = Path(path)
    if p.is_dir():
        p = p / "result.json"
    return RunResult.from_json(json.loads(p.read_text()))


# --------------------------------------------------------------------------- #
# sweeps


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float], repeats: int = 1,
          cache: StageCache | None = None, persist: bool = True) -> tuple[list[list[RunResult | None]], str]:
    """Run the pipeline per value of ``axis``; returns per-value results and CSV text.

    Failed points are logged and recorded as None; the sweep carries on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if values != sorted(values):
        raise ConfigError("sweep values must be sorted ascending")
    cache = cache or StageCache()
    path = {"trigger_size": "trigger.size", "poison_pct": "poison.fraction"}[axis]
    results: list[list[RunResult | None]] = []
    for v in values:
        v = int(v) if axis == "trigger_size" else float(v)
        row = []
        for r in range(repeats):
            sub = cfg.replace(**{path: v, "seed": cfg.seed + r,
                                 "out_dir": str(Path(cfg.out_dir) / f"{axis}_{v}" / f"rep{r}")})
            try:
                row.append(run_pipeline(sub, cache, persist))
            except StageError as exc:
                log.warning("sweep point %s=%s repeat %d failed: %s", axis, v, r, exc)
                row.append(None)
        results.append(row)
    text = sweep_csv(axis, values, results, repeats)
    if persist:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep_{axis}.csv").write_text(text)
        xs = [float(v) for v in values]
        ys = [_mean([r.asr for r in row if r]) for row in results]
        (out / f"sweep_{axis}.svg").write_text(svg_line_chart(xs, ys, axis, "ASR"))
    return results, text


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def sweep_csv(axis: str, values, results, repeats: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["value", "asr", "clean_acc"]
    if repeats > 1:
        head += ["asr_mean", "asr_min", "asr_max"]
    w.writerow(head)
    for v, row in zip(values, results):
        ok = [r for r in row if r is not None]
        asrs = [r.asr for r in ok]
        line = [v, _fmt(asrs[0] if repeats == 1 and asrs else _mean(asrs)),
                _fmt(_mean([r.clean_accuracy_infected_model for r in ok]))]
        if repeats > 1:
            line += [_fmt(_mean(asrs)), _fmt(min(asrs) if asrs else float("nan")),
                     _fmt(max(asrs) if asrs else float("nan"))]
        w.writerow(line)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def svg_line_chart(xs: Sequence[float], ys: Sequence[float], xlabel: str, ylabel: str,
                   width: int = 360, height: int = 240) -> str:
    pad = 40
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0

    def px(x):
        return pad + (x - x0) / span * (width - 2 * pad)

    def py(y):
        y = 0.0 if not np.isfinite(y) else y
        return height - pad - y * (height - 2 * pad)

    pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>']
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="steelblue"/>')
        parts.append(f'<text x="{px(x):.1f}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{x:g}</text>')
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 6}" y="{py(tick) + 3:.1f}" font-size="10" text-anchor="end">{tick:g}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 6}" font-size="11" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" '
                 f'text-anchor="middle">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------- #
# reports


def _describe(r: RunResult) -> tuple[str, str, str, str]:
    c = r.config
    return (c["trigger"]["kind"], c["perturb"]["kind"], str(c["trigger"]["size"]), f'{c["poison"]["fraction"]:g}')


def _defense_cell(r: RunResult) -> str:
    bits = []
    sp = r.defense_reports.get("spectral")
    if sp:
        bits.append(f'spectral {sp["counts"]["poisoned_removed"]}/{sp["counts"]["poisoned_total"]}')
    cl = r.defense_reports.get("cleanse")
    if cl:
        bits.append(f'cleanse max-index {max(cl["anomaly_index"]):.2f}')
    au = r.defense_reports.get("augment")
    if au:
        bits.append(f'augment asr {au["asr_augment"]:.3f}')
    return "; ".join(bits) or "-"


def emit_report(results: Sequence[RunResult], out_dir: str | Path | None = None) -> tuple[str, str]:
    """Plain-text table and CSV of (config, clean acc, ASR, defense stats). Byte-stable."""
    if not results:
        raise ValueError("emit_report needs at least one result")
    head = ["trigger", "perturb", "size", "poison", "clean_acc_clean", "clean_acc_infected", "asr", "defenses"]
    rows = []
    for r in results:
        rows.append([*_describe(r), _fmt(r.clean_accuracy_clean_model), _fmt(r.clean_accuracy_infected_model),
                     _fmt(r.asr), _defense_cell(r)])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    text = "\n".join(lines) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    w.writerows(rows)
    csv_text = buf.getvalue()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(csv_text)
        xs = list(range(len(results)))
        (out / "report.svg").write_text(svg_line_chart(xs, [r.asr for r in results], "run", "ASR"))
    return text, csv_text


TRIGGER_KINDS_ORDER = ("fixed_static", "random", "universal")


def ablation_grid(results: Sequence[RunResult]) -> str:
    """Trigger kind x perturbation kind table of ASR; missing cells print as '-'."""
    cells = {}
    for r in results:
        cells[(r.config["trigger"]["kind"], r.config["perturb"]["kind"])] = r.asr
    kinds_p = ("none", "targeted", "uniform")
    head = "trigger".ljust(14) + "".join(k.rjust(10) for k in kinds_p)
    lines = [head]
    for tk in TRIGGER_KINDS_ORDER:
        row = tk.ljust(14)
        for pk in kinds_p:
            v = cells.get((tk, pk))
            row += (f"{100 * v:.1f}" if v is not None else "-").rjust(10)
        lines.append(row)
    return "\n".join(lines) + "\n"

