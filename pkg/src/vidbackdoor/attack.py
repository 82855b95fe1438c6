"""Clean-label video backdoor: universal adversarial trigger, PGD enhancement, poisoning.

Pixel arithmetic is in [0, 1]; the customary 8-bit constants (step 1, budget 16)
become 1/255 and 16/255.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import tensor as tn
from .tensor import Tape, Tensor
from .videodata import Split, VideoDataset, VideoSample

TRIGGER_MAGIC = b"VBT1"
TRIGGER_VERSION = 1
TRIGGER_KINDS = ("universal", "fixed_static", "random")
PERTURB_KINDS = ("none", "targeted", "uniform")
PGD_CHUNK = 10


class Classifier(Protocol):
    class_count: int

    def logits(self, x: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class TriggerMask:
    """Square patch of side ``w`` with top-left corner (row0, col0), identical on every frame."""

    row0: int
    col0: int
    w: int

    @classmethod
    def bottom_right(cls, w: int, dims) -> "TriggerMask":
        T, H, W, C = dims
        return cls(H - w, W - w, w)

    def check(self, dims) -> None:
        T, H, W, C = dims
        if self.w < 0 or self.row0 < 0 or self.col0 < 0 or self.row0 + self.w > H or self.col0 + self.w > W:
            raise ValueError(f"trigger patch ({self.row0},{self.col0}) size {self.w} is outside the {H}x{W} frame")

    def array(self, dims) -> np.ndarray:
        """Binary mask of shape [T,H,W,C]."""
        m = np.zeros(dims, np.float32)
        m[:, self.row0:self.row0 + self.w, self.col0:self.col0 + self.w, :] = 1
        return m


@dataclass
class TriggerPattern:
    values: np.ndarray  # float32 [T, w, w, C]
    kind: str = "universal"
    target_class: int = 0
    seed: int = 0
    steps: int = 0
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    @property
    def w(self) -> int:
        return int(self.values.shape[1])

    def header(self) -> dict:
        return {"kind": self.kind, "w": self.w, "dims": list(self.values.shape),
                "target_class": self.target_class, "seed": self.seed, "steps": self.steps}


@dataclass(frozen=True)
class TriggerGenConfig:
    steps: int = 2000
    step_size: float = 1 / 255
    batch_size: int = 10
    size: int = 4
    target_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError(f"invalid trigger generation config {self}")


@dataclass(frozen=True)
class PerturbConfig:
    kind: str = "targeted"
    epsilon: float = 16 / 255
    steps: int = 40
    step_size: float | None = None  # default epsilon / 8

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {PERTURB_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size is not None and self.step_size > self.epsilon:
            raise ValueError("pgd step size must not exceed epsilon")

    @property
    def step(self) -> float:
        return self.epsilon / 8 if self.step_size is None else self.step_size


@dataclass(frozen=True)
class PoisonPlan:
    target_class: int = 0
    fraction: float = 0.3
    perturb: PerturbConfig = PerturbConfig()
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError(f"poisoning fraction must be in [0,1], got {self.fraction}")


# --------------------------------------------------------------------------- #
# trigger application


def patch_frames(frames: np.ndarray, trigger: TriggerPattern, mask: TriggerMask) -> np.ndarray:
    """(1-m)*x + m*t for a batch [n,T,H,W,C] or a single video [T,H,W,C]."""
    single = frames.ndim == 4
    x = frames[None] if single else frames
    mask.check(x.shape[1:])
    if mask.w == 0:
        out = x.copy()
    else:
        if trigger.values.shape != (x.shape[1], mask.w, mask.w, x.shape[4]):
            raise ValueError(f"trigger shape {trigger.values.shape} does not fit mask size {mask.w} "
                             f"and video dims {x.shape[1:]}")
        out = tn.patch(Tensor(x), Tensor(trigger.values), mask.row0, mask.col0).data
    return out[0] if single else out


def apply_trigger(x: VideoSample, trigger: TriggerPattern, mask: TriggerMask) -> VideoSample:
    return VideoSample(patch_frames(x.frames, trigger, mask), x.label, x.sample_id)


def init_trigger(size: int, dims, seed: int) -> np.ndarray:
    T, H, W, C = dims
    return np.random.default_rng(seed).random((T, size, size, C), dtype=np.float32)


def baseline_trigger(kind: str, w: int, T: int, C: int, seed: int = 0) -> TriggerPattern:
    """``fixed_static``: 1-pixel checkerboard, same on every frame. ``random``: i.i.d. uniform per frame."""
    if kind == "fixed_static":
        yy, xx = np.mgrid[0:w, 0:w]
        board = ((yy + xx) % 2 == 0).astype(np.float32)
        vals = np.broadcast_to(board[None, :, :, None], (T, w, w, C)).copy()
    elif kind == "random":
        vals = np.random.default_rng(seed).random((T, w, w, C), dtype=np.float32)
    else:
        raise ValueError(f"baseline trigger kind must be fixed_static or random, got {kind!r}")
    return TriggerPattern(vals, kind=kind, seed=seed)


def generate_universal_trigger(model: Classifier, dataset: VideoDataset, cfg: TriggerGenConfig,
                               mask: TriggerMask | None = None,
                               callback: Callable[[int, np.ndarray, float], None] | None = None) -> TriggerPattern:
    """Sign-gradient descent on the patch toward ``cfg.target_class`` over non-target videos.

    Each step draws ``batch_size`` non-target training videos, patches them with
    the current trigger, sums -(1/l) log h_target over the batch, and moves every
    trigger value by -step_size * sign(gradient), then clips to [0, 1].
    ``callback(step, sample_ids, loss)`` sees every batch.
    """
    l = model.class_count
    if l < 2:
        raise ValueError("trigger generation needs at least one non-target class")
    if not 0 <= cfg.target_class < l:
        raise ValueError(f"target class {cfg.target_class} outside [0,{l})")
    dims = dataset.dims
    mask = mask or TriggerMask.bottom_right(cfg.size, dims)
    mask.check(dims)
    if mask.w != cfg.size:
        raise ValueError(f"mask size {mask.w} disagrees with trigger size {cfg.size}")
    rng = np.random.default_rng(cfg.seed)
    t = rng.random((dims[0], cfg.size, cfg.size, dims[3]), dtype=np.float32)
    pool = np.flatnonzero(dataset.train.labels != cfg.target_class)
    if len(pool) == 0:
        raise ValueError("no non-target training videos to optimise the trigger on")
    b = min(cfg.batch_size, len(pool))
    alpha = np.float32(cfg.step_size)
    trace = np.zeros(cfg.steps, np.float32)
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(pool, size=b, replace=False))
        x = Tensor(dataset.train.frames[idx])
        tt = Tensor(t, requires_grad=True)
        target = tn.one_hot(np.full(b, cfg.target_class), l)
        with Tape() as tape:
            loss = tn.softmax_cross_entropy(model.logits(tn.patch(x, tt, mask.row0, mask.col0)),
                                            target, reduction="sum")
            (g,) = tape.gradient(loss, [tt])
        val = loss.item()
        if not np.isfinite(val):
            raise FloatingPointError(f"trigger loss became {val} at step {step}")
        trace[step] = val
        t = np.clip(t - alpha * np.sign(g), 0, 1).astype(np.float32)
        if callback is not None:
            callback(step, dataset.train.ids[idx], val)
    return TriggerPattern(t, "universal", cfg.target_class, cfg.seed, cfg.steps, trace)


def trigger_loss(model: Classifier, frames: np.ndarray, trigger: TriggerPattern, mask: TriggerMask,
                 target_class: int) -> float:
    """Mean per-sample -(1/l) log h_target over patched ``frames``."""
    l = model.class_count
    x = patch_frames(frames, trigger, mask)
    return tn.softmax_cross_entropy(model.logits(Tensor(x)), tn.one_hot(np.full(len(x), target_class), l)).item()


# --------------------------------------------------------------------------- #
# PGD enhancement


def _pgd_loss(model: Classifier, x: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    l = model.class_count
    logits = model.logits(x)
    if kind == "targeted":
        # maximise -(1/l) sum_j y_j log h_j for the true one-hot y
        return tn.softmax_cross_entropy(logits, tn.one_hot(labels, l), reduction="sum")
    # maximise (1/l) sum_j (1/l) log h_j, i.e. minimise cross-entropy to the uniform distribution
    uniform = np.full((len(labels), l), 1.0 / l, dtype=np.float32)
    return tn.softmax_cross_entropy(logits, uniform, reduction="sum") * -1.0


def pgd_perturb_frames(model: Classifier, frames: np.ndarray, labels: np.ndarray, cfg: PerturbConfig,
                       callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """l-inf PGD ascent from x: x_hat <- clip01(proj_eps(x_hat + step * sign(dL/dx_hat)))."""
    x0 = np.asarray(frames, dtype=np.float32)
    if cfg.kind == "none" or cfg.steps == 0 or cfg.epsilon == 0:
        return x0.copy()
    eps = np.float32(cfg.epsilon)
    step = np.float32(cfg.step)
    lo = np.clip(x0 - eps, 0, 1)
    hi = np.clip(x0 + eps, 0, 1)
    xh = x0.copy()
    for it in range(cfg.steps):
        for s in range(0, len(xh), PGD_CHUNK):
            sl = slice(s, s + PGD_CHUNK)
            xt = Tensor(xh[sl], requires_grad=True)
            with Tape() as tape:
                loss = _pgd_loss(model, xt, labels[sl], cfg.kind)
                (g,) = tape.gradient(loss, [xt])
            xh[sl] = np.minimum(np.maximum(xh[sl] + step * np.sign(g), lo[sl]), hi[sl])
        if callback is not None:
            callback(it, xh)
    return xh


def pgd_perturb(model: Classifier, x: VideoSample, cfg: PerturbConfig,
                callback: Callable[[int, np.ndarray], None] | None = None) -> VideoSample:
    out = pgd_perturb_frames(model, x.frames[None], np.array([x.label]), cfg,
                             None if callback is None else (lambda it, xh: callback(it, xh[0])))
    return VideoSample(out[0], x.label, x.sample_id)


# --------------------------------------------------------------------------- #
# poisoning


def select_poison_ids(split: Split, plan: PoisonPlan) -> np.ndarray:
    cand = split.ids[split.labels == plan.target_class]
    if len(cand) == 0:
        raise ValueError(f"target class {plan.target_class} has no training samples")
    n = int(np.floor(plan.fraction * len(cand) + 0.5))
    chosen = np.random.default_rng(plan.seed).choice(cand, size=n, replace=False)
    return np.sort(chosen)


def build_poisoned_dataset(dataset: VideoDataset, model: Classifier, plan: PoisonPlan,
                           trigger: TriggerPattern, mask: TriggerMask,
                           pgd_callback: Callable[[int, np.ndarray], None] | None = None
                           ) -> tuple[VideoDataset, np.ndarray]:
    """Perturb then patch a seeded fraction of target-class training videos. Labels are never changed."""
    if not 0 <= plan.fraction <= 1:
        raise ValueError("poisoning fraction must be in [0,1]")
    train = dataset.train.copy()
    poison_ids = select_poison_ids(train, plan)
    if len(poison_ids):
        pos = np.flatnonzero(np.isin(train.ids, poison_ids))
        x = pgd_perturb_frames(model, train.frames[pos], train.labels[pos], plan.perturb, pgd_callback)
        train.frames[pos] = patch_frames(x, trigger, mask)
    return dataset.replace_train(train), poison_ids


# --------------------------------------------------------------------------- #
# trigger files


def save_trigger(trigger: TriggerPattern, path: str | Path) -> None:
    head = json.dumps(trigger.header(), sort_keys=True).encode("utf-8")
    trace = np.ascontiguousarray(trigger.loss_trace, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TRIGGER_MAGIC)
        fh.write(struct.pack("<II", TRIGGER_VERSION, len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(trigger.values, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", trace.size))
        fh.write(trace.tobytes())


def load_trigger(path: str | Path) -> TriggerPattern:
    buf = Path(path).read_bytes()
    if buf[:4] != TRIGGER_MAGIC:
        raise ValueError(f"{path}: bad trigger magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != TRIGGER_VERSION:
        raise ValueError(f"{path}: trigger version {version}, expected {TRIGGER_VERSION}")
    head = json.loads(buf[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    dims = tuple(head["dims"])
    n = int(np.prod(dims))
    values = np.frombuffer(buf, "<f4", n, off).reshape(dims).astype(np.float32)
    off += 4 * n
    (m,) = struct.unpack_from("<I", buf, off)
    trace = np.frombuffer(buf, "<f4", m, off + 4).astype(np.float32)
    return TriggerPattern(values, head["kind"], int(head["target_class"]), int(head["seed"]),
                          int(head["steps"]), trace)
