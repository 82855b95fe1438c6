"""Small video classifiers: a 3D ConvNet and a per-frame CNN with an Elman recurrence."""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import ParamSet, Tensor, Tape
from .videodata import Split, VideoDataset, augment, batches, VideoSample

ARCHITECTURES = ("conv3d_small", "frame_rnn")
CHECKPOINT_MAGIC = b"VBM1"
CHECKPOINT_VERSION = 1
RNN_HIDDEN = 32
EVAL_CHUNK = 50


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "conv3d_small"
    dims: tuple[int, int, int, int] = (16, 32, 32, 3)
    class_count: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        T, H, W, C = self.dims
        if H < 4 or W < 4 or (self.arch == "conv3d_small" and T < 4):
            raise ValueError(f"dims {self.dims} too small for two pooling stages")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["dims"]), int(d["class_count"]), int(d["seed"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    losses: list[float]
    test_accuracy: float
    seconds: float = field(default=0.0, compare=False)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, shape).astype(np.float32)


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int, int]]:
    """(name, shape, fan_in, fan_out) in construction order; biases carry fans of 0."""
    C, l = spec.dims[3], spec.class_count
    if spec.arch == "conv3d_small":
        return [("conv1.w", (8, 3, 3, 3, C), 27 * C, 27 * 8), ("conv1.b", (8,), 0, 0),
                ("conv2.w", (16, 3, 3, 3, 8), 27 * 8, 27 * 16), ("conv2.b", (16,), 0, 0),
                ("fc.w", (l, 16), 16, l), ("fc.b", (l,), 0, 0)]
    return [("conv1.w", (8, 3, 3, C), 9 * C, 9 * 8), ("conv1.b", (8,), 0, 0),
            ("conv2.w", (16, 3, 3, 8), 9 * 8, 9 * 16), ("conv2.b", (16,), 0, 0),
            ("rnn.w_in", (RNN_HIDDEN, 16), 16, RNN_HIDDEN),
            ("rnn.w_rec", (RNN_HIDDEN, RNN_HIDDEN), RNN_HIDDEN, RNN_HIDDEN),
            ("rnn.b", (RNN_HIDDEN,), 0, 0),
            ("fc.w", (l, RNN_HIDDEN), RNN_HIDDEN, l), ("fc.b", (l,), 0, 0)]


class VideoModel:
    """A ModelSpec together with its ParamSet."""

    def __init__(self, spec: ModelSpec, params: ParamSet):
        self.spec = spec
        self.params = params

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def feature_dim(self) -> int:
        return 16 if self.spec.arch == "conv3d_small" else RNN_HIDDEN

    def _check(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != tuple(self.spec.dims):
            raise tn.ShapeError(f"input dims {x.shape[1:]} do not match model dims {self.spec.dims}")

    def features(self, x: Tensor) -> Tensor:
        """Penultimate representation: the input to the final dense layer."""
        self._check(x)
        p = self.params
        if self.spec.arch == "conv3d_small":
            h = tn.maxpool3d(tn.relu(tn.conv3d(x, p["conv1.w"], p["conv1.b"])))
            h = tn.maxpool3d(tn.relu(tn.conv3d(h, p["conv2.w"], p["conv2.b"])))
            return tn.global_average_pool(h)
        n, T, H, W, C = x.shape
        f = tn.reshape(x, (n * T, H, W, C))
        f = tn.maxpool2d(tn.relu(tn.conv2d(f, p["conv1.w"], p["conv1.b"])))
        f = tn.maxpool2d(tn.relu(tn.conv2d(f, p["conv2.w"], p["conv2.b"])))
        f = tn.reshape(tn.global_average_pool(f), (n, T, 16))
        h = Tensor(np.zeros((n, RNN_HIDDEN), dtype=x.dtype))
        for t in range(T):
            h = tn.elman_step(tn.select(f, 1, t), h, p["rnn.w_in"], p["rnn.w_rec"], p["rnn.b"])
        return h

    def logits(self, x: Tensor) -> Tensor:
        return tn.dense(self.features(x), self.params["fc.w"], self.params["fc.b"])

    def forward(self, x: Tensor) -> Tensor:
        """Softmax class probabilities h = F(x)."""
        return tn.softmax(self.logits(x))

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def copy(self) -> "VideoModel":
        return VideoModel(self.spec, self.params.copy_params())


def build_model(spec: ModelSpec) -> VideoModel:
    rng = np.random.default_rng(spec.seed)
    params = ParamSet()
    for name, shape, fan_in, fan_out in _layer_shapes(spec):
        if fan_in:
            data = _glorot(rng, shape, fan_in, fan_out)
        else:
            data = np.zeros(shape, np.float32)
        params[name] = Tensor(data, name=name)
    return VideoModel(spec, params)


def _chunks(n: int, size: int = EVAL_CHUNK):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def predict(model: VideoModel, frames: np.ndarray) -> np.ndarray:
    """Softmax probabilities for a batch [n,T,H,W,C] (or one video [T,H,W,C])."""
    single = frames.ndim == 4
    x = frames[None] if single else frames
    out = np.concatenate([model.forward(Tensor(x[s])).data for s in _chunks(len(x))]) if len(x) else \
        np.zeros((0, model.class_count), np.float32)
    return out[0] if single else out


def predict_labels(model: VideoModel, frames: np.ndarray) -> np.ndarray:
    if len(frames) == 0:
        return np.zeros(0, np.int64)
    return np.concatenate([model.logits(Tensor(frames[s])).data.argmax(axis=1)
                           for s in _chunks(len(frames))])


def evaluate_accuracy(model: VideoModel, split: Split) -> float:
    if len(split) == 0:
        raise ValueError("cannot evaluate accuracy on an empty split")
    return float(np.mean(predict_labels(model, split.frames) == split.labels))


def latent_features(model: VideoModel, frames: np.ndarray) -> np.ndarray:
    single = frames.ndim == 4
    x = frames[None] if single else frames
    out = np.concatenate([model.features(Tensor(x[s])).data for s in _chunks(len(x))])
    return out[0] if single else out


def _augment_batch(frames: np.ndarray, labels: np.ndarray, ids: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    out = np.empty_like(frames)
    for i in range(len(frames)):
        s = VideoSample(frames[i], int(labels[i]), int(ids[i]))
        out[i] = augment(s, seed=int(np.random.SeedSequence([seed, epoch, int(ids[i])]).generate_state(1)[0])).frames
    return out


def train(model: VideoModel, dataset: VideoDataset, cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainReport:
    """SGD with momentum on mean cross-entropy; updates ``model.params`` in place."""
    if tuple(dataset.dims) != tuple(model.spec.dims):
        raise tn.ShapeError(f"dataset dims {dataset.dims} do not match model dims {model.spec.dims}")
    start = time.perf_counter()
    split = dataset.train
    l = model.class_count
    params = list(model.params.values())
    velocity = [np.zeros_like(p.data) for p in params]
    lr = np.float32(cfg.learning_rate)
    mom = np.float32(cfg.momentum)
    losses = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(split), cfg.batch_size, int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])):
            x = split.frames[idx]
            if cfg.augment:
                x = _augment_batch(x, split.labels[idx], split.ids[idx], cfg.seed, epoch)
            for p in params:
                p.requires_grad = True
            with Tape() as tape:
                loss = tn.softmax_cross_entropy(model.logits(Tensor(x)), tn.one_hot(split.labels[idx], l))
                grads = tape.gradient(loss, params)
            for p in params:
                p.requires_grad = False
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(f"loss became {val} at epoch {epoch}")
            if lr != 0:
                for p, v, g in zip(params, velocity, grads):
                    v *= mom
                    v += g
                    p.data -= lr * v
            total += val * len(idx)
            count += len(idx)
        losses.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    acc = evaluate_accuracy(model, dataset.test) if len(dataset.test) else float("nan")
    return TrainReport(losses, acc, time.perf_counter() - start)


# --------------------------------------------------------------------------- #
# checkpoints


def save_checkpoint(model: VideoModel, path: str | Path) -> None:
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(spec)))
        fh.write(spec)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> VideoModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, slen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    spec = ModelSpec.from_dict(json.loads(buf[off:off + slen].decode("utf-8")))
    off += slen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = ParamSet()
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + nl].decode("utf-8")
        off += 4 + nl
        (rank,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        n = int(np.prod(shape))
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        params[name] = Tensor(data, name=name)
    return VideoModel(spec, params)
