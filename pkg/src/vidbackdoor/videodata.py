"""MovingShapes: deterministic synthetic video classification data.

Each class is a sprite shape translating with a fixed motion vector. Videos
are float32 arrays [T, H, W, C] with values in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"VBL1"
SHAPE_KINDS = ("square", "circle", "cross", "triangle", "bar")
DEFAULT_DIMS = (16, 32, 32, 3)
BACKGROUND = 0.1


class DatasetFormatError(Exception):
    code = "format"


class BadMagicError(DatasetFormatError):
    code = "bad_magic"


class VersionMismatchError(DatasetFormatError):
    code = "version_mismatch"


class TruncatedPayloadError(DatasetFormatError):
    code = "truncated"


@dataclass(frozen=True)
class ShapeClassSpec:
    kind: str
    motion: tuple[int, int]  # (dy, dx) pixels per frame
    intensity: tuple[float, ...] = (0.5, 0.5, 0.5)
    size: int = 5

    def sprite(self) -> np.ndarray:
        return render_sprite(self.kind, self.size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "motion": list(self.motion),
                "intensity": list(self.intensity), "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeClassSpec":
        return cls(d["kind"], tuple(d["motion"]), tuple(d.get("intensity", (0.5, 0.5, 0.5))),
                   d.get("size", 5))


def default_class_specs() -> list[ShapeClassSpec]:
    """square->E, circle->S, cross->NE, triangle->W, bar->N."""
    return [
        ShapeClassSpec("square", (0, 1)),
        ShapeClassSpec("circle", (1, 0)),
        ShapeClassSpec("cross", (-1, 1)),
        ShapeClassSpec("triangle", (0, -1)),
        ShapeClassSpec("bar", (-1, 0)),
    ]


def render_sprite(kind: str, size: int) -> np.ndarray:
    """Boolean [size, size] occupancy mask for a shape kind."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if kind == "square":
        m = np.ones((size, size), bool)
        m[[0, -1], :] = False
        m[:, [0, -1]] = False
    elif kind == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    elif kind == "cross":
        half = max(size // 6, 0)
        m = (np.abs(yy - c) <= half) | (np.abs(xx - c) <= half)
    elif kind == "triangle":
        # apex at the top, base on the last row
        m = np.abs(xx - c) <= (yy + 0.5) * (size / 2) / size
    elif kind == "bar":
        m = np.abs(yy - c) <= max(size // 6, 0)
    else:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    return m


def _start_range(size: int, motion: int, frames: int, extent: int) -> tuple[int, int]:
    """Legal [lo, hi] start coordinates keeping the sprite fully inside for all frames."""
    travel = motion * (frames - 1)
    lo = max(0, -travel)
    hi = extent - size - max(0, travel)
    return lo, hi


def validate_specs(specs: Sequence[ShapeClassSpec], dims: Sequence[int]) -> None:
    T, H, W, C = dims
    if len(specs) < 2:
        raise ValueError(f"need at least 2 classes, got {len(specs)}")
    for s in specs:
        if s.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {s.kind!r}")
        if len(s.intensity) != C:
            raise ValueError(f"{s.kind}: intensity has {len(s.intensity)} channels, dims need {C}")
        for m, ext in zip(s.motion, (H, W)):
            lo, hi = _start_range(s.size, m, T, ext)
            if hi < lo:
                raise ValueError(f"{s.kind}: size {s.size} with motion {s.motion} over {T} frames "
                                 f"cannot stay inside a {H}x{W} frame")


@dataclass
class VideoSample:
    frames: np.ndarray
    label: int
    sample_id: int


@dataclass
class DatasetManifest:
    classes: list[str]
    dims: tuple[int, int, int, int]
    splits: dict[str, list[int]]
    seed: int
    version: int = FORMAT_VERSION

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def split_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "dims": list(self.dims),
                "splits": {"train": list(self.splits["train"]), "test": list(self.splits["test"])},
                "seed": self.seed, "version": self.version}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(list(d["classes"]), tuple(d["dims"]),
                   {"train": list(d["splits"]["train"]), "test": list(d["splits"]["test"])},
                   int(d["seed"]), int(d["version"]))


@dataclass
class Split:
    ids: np.ndarray  # int64 [n]
    labels: np.ndarray  # int64 [n]
    frames: np.ndarray  # float32 [n, T, H, W, C]

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def sample(self, i: int) -> VideoSample:
        return VideoSample(self.frames[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, mask_or_idx) -> "Split":
        return Split(self.ids[mask_or_idx], self.labels[mask_or_idx], self.frames[mask_or_idx])

    def copy(self) -> "Split":
        return Split(self.ids.copy(), self.labels.copy(), self.frames.copy())

    @classmethod
    def empty(cls, dims) -> "Split":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, *dims), np.float32))


@dataclass
class VideoDataset:
    manifest: DatasetManifest
    train: Split
    test: Split
    class_specs: list[ShapeClassSpec] = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.manifest.dims)

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    def split(self, name: str) -> Split:
        return {"train": self.train, "test": self.test}[name]

    def digest(self) -> str:
        """SHA-256 over ids, labels and frame bytes of both splits."""
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest.to_json(), sort_keys=True).encode())
        for s in (self.train, self.test):
            h.update(s.ids.astype("<u8").tobytes())
            h.update(s.labels.astype("<u2").tobytes())
            h.update(s.frames.astype("<f4").tobytes())
        return h.hexdigest()

    def replace_train(self, train: Split) -> "VideoDataset":
        return VideoDataset(self.manifest, train, self.test, list(self.class_specs))


def render_video(spec: ShapeClassSpec, start: tuple[int, int], dims, noise: np.ndarray | None) -> np.ndarray:
    T, H, W, C = dims
    frames = np.full((T, H, W, C), BACKGROUND, dtype=np.float32)
    sprite = spec.sprite()
    col = np.asarray(spec.intensity, dtype=np.float32)
    for f in range(T):
        y = start[0] + spec.motion[0] * f
        x = start[1] + spec.motion[1] * f
        y0, x0 = max(y, 0), max(x, 0)
        y1, x1 = min(y + spec.size, H), min(x + spec.size, W)
        if y1 <= y0 or x1 <= x0:
            continue
        sub = sprite[y0 - y:y1 - y, x0 - x:x1 - x]
        region = frames[f, y0:y1, x0:x1]
        region[sub] = col
    if noise is not None:
        frames += noise
        np.clip(frames, 0.0, 1.0, out=frames)
    return frames


def generate_dataset(specs: Sequence[ShapeClassSpec] | None = None, per_class_train: int = 100,
                     per_class_test: int = 40, dims: Sequence[int] = DEFAULT_DIMS,
                     noise_std: float = 0.1, seed: int = 0) -> VideoDataset:
    specs = list(specs) if specs is not None else default_class_specs()
    dims = tuple(int(d) for d in dims)
    validate_specs(specs, dims)
    T, H, W, C = dims
    rng = np.random.default_rng(seed)
    splits: dict[str, Split] = {}
    next_id = 0
    for name, per_class in (("train", per_class_train), ("test", per_class_test)):
        n = per_class * len(specs)
        frames = np.empty((n, T, H, W, C), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        k = 0
        for label, spec in enumerate(specs):
            (ylo, yhi) = _start_range(spec.size, spec.motion[0], T, H)
            (xlo, xhi) = _start_range(spec.size, spec.motion[1], T, W)
            for _ in range(per_class):
                start = (int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1)))
                noise = rng.normal(0.0, noise_std, (T, H, W, C)).astype(np.float32) if noise_std > 0 else None
                frames[k] = render_video(spec, start, dims, noise)
                labels[k] = label
                k += 1
        splits[name] = Split(ids, labels, frames)
    manifest = DatasetManifest([s.kind for s in specs], dims,
                               {k: v.ids.tolist() for k, v in splits.items()}, int(seed))
    return VideoDataset(manifest, splits["train"], splits["test"], specs)


# --------------------------------------------------------------------------- #
# persistence


def save_dataset(ds: VideoDataset, path: str | Path) -> None:
    man = json.dumps(ds.manifest.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(man)))
        fh.write(man)
        for s in (ds.train, ds.test):
            for i in range(len(s)):
                fh.write(struct.pack("<QH", int(s.ids[i]), int(s.labels[i])))
                fh.write(np.ascontiguousarray(s.frames[i], dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> VideoDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    if len(buf) < 12 + mlen:
        raise TruncatedPayloadError(f"{path}: manifest truncated")
    manifest = DatasetManifest.from_json(json.loads(buf[12:12 + mlen].decode("utf-8")))
    if manifest.version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: manifest version {manifest.version}")
    dims = tuple(manifest.dims)
    per = int(np.prod(dims))
    rec = 10 + 4 * per
    off = 12 + mlen
    splits = {}
    for name in ("train", "test"):
        want = manifest.splits[name]
        n = len(want)
        if len(buf) < off + n * rec:
            raise TruncatedPayloadError(f"{path}: {name} split truncated")
        ids = np.empty(n, np.int64)
        labels = np.empty(n, np.int64)
        frames = np.empty((n, *dims), np.float32)
        for i in range(n):
            sid, lab = struct.unpack_from("<QH", buf, off)
            ids[i], labels[i] = sid, lab
            frames[i] = np.frombuffer(buf, dtype="<f4", count=per, offset=off + 10).reshape(dims)
            off += rec
        if ids.tolist() != list(want):
            raise DatasetFormatError(f"{path}: {name} record ids disagree with manifest")
        if n and labels.max() >= manifest.class_count:
            raise DatasetFormatError(f"{path}: label out of range")
        splits[name] = Split(ids, labels, frames)
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return VideoDataset(manifest, splits["train"], splits["test"])


def payload_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- #
# augmentation and batching


def _bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of [T, h, w, C]; same-size input is returned exactly."""
    T, h, w, C = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()

    def coords(n_in, n_out):
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    ylo, yhi, wy = coords(h, out_h)
    xlo, xhi, wx = coords(w, out_w)
    wx = wx[None, None, :, None]
    top = frames[:, ylo][:, :, xlo] + wx * (frames[:, ylo][:, :, xhi] - frames[:, ylo][:, :, xlo])
    bot = frames[:, yhi][:, :, xlo] + wx * (frames[:, yhi][:, :, xhi] - frames[:, yhi][:, :, xlo])
    out = top + wy[None, :, None, None] * (bot - top)
    return out.astype(np.float32)


def augment(sample: VideoSample, seed: int, flip_p: float = 0.5, crop_ratio: float = 0.875,
            drop_p: float = 0.25) -> VideoSample:
    """Random horizontal flip, random crop + bilinear resize back, random frame dropping.

    Dropped frames are replaced by the nearest earlier kept frame (frame 0 is
    always kept). ``flip_p=0, crop_ratio=1, drop_p=0`` is the identity.
    """
    rng = np.random.default_rng(seed)
    x = sample.frames
    T, H, W, C = x.shape
    if rng.random() < flip_p:
        x = x[:, :, ::-1, :]
    ch, cw = max(1, int(round(H * crop_ratio))), max(1, int(round(W * crop_ratio)))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    x = _bilinear_resize(np.ascontiguousarray(x[:, y0:y0 + ch, x0:x0 + cw, :]), H, W)
    keep = rng.random(T) >= drop_p
    keep[0] = True
    src = np.maximum.accumulate(np.where(keep, np.arange(T), 0))
    x = np.clip(x[src], 0.0, 1.0)
    return VideoSample(x, sample.label, sample.sample_id)


def flip_frames(frames: np.ndarray) -> np.ndarray:
    return frames[..., :, ::-1, :].copy()


def batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Seeded permutation of range(n) cut into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n == 0:
        return
    perm = np.random.default_rng(seed).permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def split_batches(split: Split, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Batches of sample ids (not positions) drawn from ``split``."""
    for idx in batches(len(split), batch_size, seed):
        yield split.ids[idx]
