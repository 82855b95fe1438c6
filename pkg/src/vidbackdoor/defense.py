"""Defenses: spectral signatures, trigger reverse-engineering with MAD scoring, augmentation."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .attack import TriggerMask, TriggerPattern
from .metrics import compute_asr
from .models import ModelSpec, TrainConfig, VideoModel, build_model, evaluate_accuracy, latent_features, train
from .tensor import Tape, Tensor
from .videodata import VideoDataset

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0


# --------------------------------------------------------------------------- #
# spectral signatures


def signature_scores(features: np.ndarray) -> np.ndarray:
    """Squared projection of centred features onto their top right-singular vector."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {f.shape}")
    centred = f - f.mean(axis=0)
    cov = centred.T @ centred
    if not np.any(cov):
        return np.zeros(f.shape[0])
    _, vecs = np.linalg.eigh(cov)
    v = vecs[:, -1]
    return (centred @ v) ** 2


def spectral_scores(model: VideoModel, frames: np.ndarray) -> np.ndarray:
    return signature_scores(latent_features(model, frames))


def spectral_filter(scores: np.ndarray, ids: np.ndarray, expected_poison: int, multiplier: float = 1.0) -> np.ndarray:
    """Ids of the top round(multiplier * expected_poison) scores; ties go to the smaller id."""
    if expected_poison < 0 or multiplier < 0:
        raise ValueError("expected_poison and multiplier must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    budget = int(np.floor(multiplier * expected_poison + 0.5))
    if budget > len(ids):
        warnings.warn(f"removal budget {budget} exceeds class size {len(ids)}; clamping", stacklevel=2)
        budget = len(ids)
    order = np.lexsort((ids, -scores))
    return np.sort(ids[order[:budget]])


@dataclass
class SpectralReport:
    scores: dict[int, float]
    budget: int
    removed_ids: list[int]
    counts: dict[str, int]

    def to_json(self) -> dict:
        d = asdict(self)
        d["scores"] = {str(k): v for k, v in self.scores.items()}
        return d


def run_spectral(model: VideoModel, dataset: VideoDataset, target_class: int, poison_ids,
                 expected_poison: int | None = None, multiplier: float = 1.0) -> SpectralReport:
    """Score the target class of the training split and remove the top outliers."""
    split = dataset.train
    sel = split.labels == target_class
    ids = split.ids[sel]
    scores = spectral_scores(model, split.frames[sel])
    poison = set(int(i) for i in poison_ids)
    k = len(poison) if expected_poison is None else expected_poison
    removed = spectral_filter(scores, ids, k, multiplier)
    n_poison = sum(int(i) in poison for i in ids)
    p_removed = sum(int(i) in poison for i in removed)
    counts = {"clean_total": int(len(ids) - n_poison), "poisoned_total": int(n_poison),
              "clean_removed": int(len(removed) - p_removed), "poisoned_removed": int(p_removed)}
    return SpectralReport({int(i): float(s) for i, s in zip(ids, scores)}, int(len(removed)),
                          [int(i) for i in removed], counts)


# --------------------------------------------------------------------------- #
# trigger reverse-engineering


@dataclass
class ReversedTrigger:
    target_class: int
    mask: np.ndarray  # [H, W] in [0,1]
    pattern: np.ndarray  # [C] in [0,1]
    l1: float
    objective: list[float] = field(default_factory=list)

    def as_trigger(self, dims, seed: int = 0) -> TriggerPattern:
        """Pack as a two-frame full-size trigger (frame 0: mask, frame 1: pattern) for the trigger file."""
        T, H, W, C = dims
        vals = np.empty((2, H, W, C), np.float32)
        vals[0] = self.mask[:, :, None]
        vals[1] = self.pattern[None, None, :]
        return TriggerPattern(vals, "reversed", self.target_class, seed, len(self.objective),
                              np.asarray(self.objective, np.float32))


def reverse_engineer_trigger(model: VideoModel, probes: np.ndarray, target_class: int, lam: float = 1e-3,
                             steps: int = 100, lr: float = 1.0, seed: int = 0) -> ReversedTrigger:
    """Minimise mean CE toward ``target_class`` + lam * ||mask||_1 by fixed-step gradient descent.

    The mask is a sigmoid-parameterised [H, W] map shared by every frame and
    channel; the pattern is a sigmoid-parameterised colour per channel.
    """
    n, T, H, W, C = probes.shape
    l = model.class_count
    rng = np.random.default_rng(seed)
    m_raw = rng.uniform(-2.0, 0.0, (H, W)).astype(np.float32)
    p_raw = rng.uniform(-1.0, 1.0, (C,)).astype(np.float32)
    x = Tensor(np.asarray(probes, np.float32))
    target = tn.one_hot(np.full(n, target_class), l)
    lam_t = Tensor(np.float32(lam))
    objective = []
    for _ in range(steps + 1):
        mr = Tensor(m_raw, requires_grad=True)
        pr = Tensor(p_raw, requires_grad=True)
        with Tape() as tape:
            m = tn.sigmoid(mr)
            mb = tn.reshape(m, (1, 1, H, W, 1))
            pb = tn.reshape(tn.sigmoid(pr), (1, 1, 1, 1, C))
            xs = tn.add(x, tn.mul(mb, tn.add(pb, tn.mul(x, Tensor(np.float32(-1))))))
            ce = tn.softmax_cross_entropy(model.logits(xs), target)
            obj = tn.add(ce, tn.mul(lam_t, tn.sum_all(m)))
            gm, gp = tape.gradient(obj, [mr, pr])
        val = obj.item()
        if not np.isfinite(val):
            raise FloatingPointError(f"reverse-engineering objective diverged for class {target_class}")
        objective.append(val)
        if len(objective) > steps:
            break
        m_raw = (m_raw - np.float32(lr) * gm).astype(np.float32)
        p_raw = (p_raw - np.float32(lr) * gp).astype(np.float32)
    mask = 1.0 / (1.0 + np.exp(-m_raw))
    pattern = 1.0 / (1.0 + np.exp(-p_raw))
    return ReversedTrigger(target_class, mask.astype(np.float32), pattern.astype(np.float32),
                           float(mask.sum()), objective)


def anomaly_index(l1_norms) -> np.ndarray:
    """|l1 - median| / (1.4826 * MAD); all zeros when MAD is 0."""
    a = np.asarray(l1_norms, dtype=np.float64)
    if a.size < 3:
        raise ValueError("anomaly index needs at least 3 classes")
    med = np.median(a)
    dev = np.abs(a - med)
    mad = np.median(dev)
    if mad == 0:
        return np.zeros_like(a)
    return dev / (MAD_CONSISTENCY * mad)


def flagged_classes(l1_norms, threshold: float = ANOMALY_THRESHOLD) -> list[int]:
    a = np.asarray(l1_norms, dtype=np.float64)
    idx = anomaly_index(a)
    med = np.median(a)
    return [int(c) for c in np.flatnonzero((idx > threshold) & (a < med))]


@dataclass
class CleanseReport:
    l1_norms: list[float]
    anomaly_index: list[float]
    flagged_classes: list[int]

    def to_json(self) -> dict:
        return asdict(self)


def probe_set(dataset: VideoDataset, target_class: int, per_class: int) -> np.ndarray:
    """First ``per_class`` test videos of every class other than ``target_class``."""
    split = dataset.test
    picks = []
    for c in range(dataset.class_count):
        if c == target_class:
            continue
        picks.extend(np.flatnonzero(split.labels == c)[:per_class].tolist())
    return split.frames[np.sort(np.asarray(picks, dtype=np.int64))]


def run_cleanse(model: VideoModel, dataset: VideoDataset, lam: float = 1e-3, steps: int = 100, lr: float = 1.0,
                probes_per_class: int = 5, seed: int = 0) -> tuple[CleanseReport, list[ReversedTrigger]]:
    reversed_triggers = []
    for c in range(dataset.class_count):
        probes = probe_set(dataset, c, probes_per_class)
        reversed_triggers.append(reverse_engineer_trigger(model, probes, c, lam, steps, lr, seed))
    l1 = [r.l1 for r in reversed_triggers]
    report = CleanseReport(l1, anomaly_index(l1).tolist(), flagged_classes(l1))
    return report, reversed_triggers


# --------------------------------------------------------------------------- #
# augmentation resistance


@dataclass
class AugmentReport:
    clean_acc_no_augment: float
    clean_acc_augment: float
    asr_no_augment: float
    asr_augment: float
    asr_difference: float
    augment_applied_to: str = "all_training_samples"

    def to_json(self) -> dict:
        return asdict(self)


def augmentation_resistance(poisoned: VideoDataset, spec: ModelSpec, cfg: TrainConfig, trigger: TriggerPattern,
                            mask: TriggerMask, target_class: int,
                            train_fn: Callable[[VideoDataset, TrainConfig], VideoModel] | None = None
                            ) -> AugmentReport:
    """Train on the same poisoned data with and without augmentation; report both arms."""
    if train_fn is None:
        def train_fn(ds, c):
            m = build_model(spec)
            train(m, ds, c)
            return m

    arms = {}
    for flag in (False, True):
        c = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.seed, flag)
        m = train_fn(poisoned, c)
        arms[flag] = (evaluate_accuracy(m, poisoned.test),
                      compute_asr(m, poisoned.test, trigger, mask, target_class))
    return AugmentReport(arms[False][0], arms[True][0], arms[False][1], arms[True][1],
                         arms[False][1] - arms[True][1])
