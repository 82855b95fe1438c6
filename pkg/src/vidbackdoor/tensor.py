"""Dense tensors with tape-based reverse-mode differentiation.

Only the layer set the video models need is supported. Arrays are numpy,
channels-last ([N, T, H, W, C] for videos) and row-major. Training and attacks
run in float32; gradient checks run in float64.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), _wrap(-1.0, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, _wrap(-1.0, self.dtype)))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class ParamSet(OrderedDict):
    """Ordered parameter-id -> Tensor map. Shapes are fixed at construction."""

    def __setitem__(self, key, value):
        if key in self and self[key].shape != value.shape:
            raise ShapeError(f"parameter {key!r} shape is immutable: {self[key].shape} -> {value.shape}")
        super().__setitem__(key, value)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.values()))

    def copy_params(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out[k] = Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
        return out


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Records differentiable ops executed while active (``with Tape() as tape``)."""

    records: list[_Record] = field(default_factory=list)
    visited: list[str] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``sources`` (zeros for unreachable sources)."""
        if loss.data.size != 1:
            raise ShapeError(f"gradient needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep = {id(s) for s in sources}
        self.visited = []
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            if id(rec.output) not in keep:
                del grads[id(rec.output)]
            self.visited.append(rec.op)
            needs = tuple(t.requires_grad for t in rec.inputs)
            in_grads = rec.backward(g, needs)
            for t, gi, need in zip(rec.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != primal shape {t.shape}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


_ACTIVE: list[Tape] = []


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    t = Tensor(out)
    if _ACTIVE and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        _ACTIVE[-1].records.append(_Record(op, inputs, t, backward))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------- #
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", out, (a, b), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """``x`` indexed at ``index`` along ``axis`` (that axis is dropped)."""
    out = np.take(x.data, index, axis=axis)

    def back(g, needs):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _emit("select", out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g, needs: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _emit("mean", out, (x,), lambda g, needs: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit("relu", out, (x,), lambda g, needs: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    out = out.astype(x.dtype)
    return _emit("sigmoid", out, (x,), lambda g, needs: (g * out * (1 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (x,), back)


def patch(x: Tensor, t: Tensor, row0: int, col0: int) -> Tensor:
    """Overwrite a square region of every frame of ``x`` [N,T,H,W,C] with ``t`` [T,w,w,C].

    Equivalent to (1-m)*x + m*t for a binary mask m that is 1 on the region.
    """
    if x.data.ndim != 5 or t.data.ndim != 4:
        raise ShapeError(f"patch expects x[N,T,H,W,C] and t[T,w,w,C], got {x.shape} and {t.shape}")
    _, T, H, W, C = x.shape
    tt, w, w2, tc = t.shape
    if w != w2 or tt != T or tc != C:
        raise ShapeError(f"trigger shape {t.shape} does not conform to video shape {x.shape}")
    if row0 < 0 or col0 < 0 or row0 + w > H or col0 + w > W:
        raise ShapeError(f"patch at ({row0},{col0}) size {w} leaves the {H}x{W} frame")
    out = x.data.copy()
    out[:, :, row0:row0 + w, col0:col0 + w, :] = t.data
    region = (slice(None), slice(None), slice(row0, row0 + w), slice(col0, col0 + w), slice(None))

    def back(g, needs):
        gx = gt = None
        if needs[0]:
            gx = g.copy()
            gx[region] = 0
        if needs[1]:
            gt = g[region].sum(axis=0)
        return gx, gt

    return _emit("patch", out, (x, t), back)


# --------------------------------------------------------------------------- #
# convolution, pooling, dense


def _conv_cols(xp: np.ndarray, spatial: int) -> np.ndarray:
    """im2col over the 3-wide window on each of ``spatial`` axes after the batch axis."""
    axes = tuple(range(1, 1 + spatial))
    win = sliding_window_view(xp, (3,) * spatial, axis=axes)
    # win: [N, *out, C, 3...] -> [N, *out, 3..., C]
    nd = win.ndim
    perm = list(range(1 + spatial)) + list(range(nd - spatial, nd)) + [1 + spatial]
    win = win.transpose(perm)
    cin = xp.shape[-1]
    return win.reshape(-1, (3 ** spatial) * cin)


def _conv(x: Tensor, kernel: Tensor, bias: Tensor, spatial: int, op: str) -> Tensor:
    nd = spatial + 2
    if x.data.ndim != nd:
        raise ShapeError(f"{op}: input must have rank {nd}, got shape {x.shape}")
    if kernel.data.ndim != nd or kernel.shape[1:-1] != (3,) * spatial:
        raise ShapeError(f"{op}: kernel must be [Co,{','.join('3' * spatial)},Cin], got {kernel.shape}")
    if kernel.shape[-1] != x.shape[-1]:
        raise ShapeError(f"{op}: kernel has {kernel.shape[-1]} input channels, input has {x.shape[-1]}")
    co = kernel.shape[0]
    if bias.shape != (co,):
        raise ShapeError(f"{op}: bias must be [{co}], got {bias.shape}")
    if any(n < 1 for n in x.shape):
        raise ShapeError(f"{op}: empty extent in input shape {x.shape}")
    pad = [(0, 0)] + [(1, 1)] * spatial + [(0, 0)]
    xp = np.pad(x.data, pad)
    cols = _conv_cols(xp, spatial)
    kmat = kernel.data.reshape(co, -1)
    out = (cols @ kmat.T).reshape(*x.shape[:-1], co) + bias.data
    ext = x.shape[1:-1]

    def back(g, needs):
        g2 = g.reshape(-1, co)
        gx = gk = gb = None
        if needs[0]:
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for off in np.ndindex(*(3,) * spatial):
                sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, ext)) + (slice(None),)
                gp[sl] += g @ kernel.data[(slice(None),) + off + (slice(None),)]
            gx = gp[(slice(None),) + (slice(1, -1),) * spatial + (slice(None),)]
        if needs[1]:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _emit(op, out, (x, kernel, bias), back)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 cross-correlation, zero padding 1, stride 1: [N,T,H,W,Cin] -> [N,T,H,W,Co]."""
    return _conv(x, kernel, bias, 3, "conv3d")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1: [N,H,W,Cin] -> [N,H,W,Co]."""
    return _conv(x, kernel, bias, 2, "conv2d")


def _maxpool(x: Tensor, spatial: int, op: str) -> Tensor:
    if x.data.ndim != spatial + 2:
        raise ShapeError(f"{op}: input must have rank {spatial + 2}, got {x.shape}")
    ext = x.shape[1:-1]
    if any(n < 2 for n in ext):
        raise ShapeError(f"{op}: every pooled extent must be >= 2, got {ext}")
    out_ext = tuple(n // 2 for n in ext)
    n, c = x.shape[0], x.shape[-1]
    crop = x.data[(slice(None),) + tuple(slice(0, 2 * m) for m in out_ext) + (slice(None),)]
    split = [n]
    for m in out_ext:
        split += [m, 2]
    split.append(c)
    v = crop.reshape(split)
    # move the window axes (2, 4, ...) to the end
    win_axes = [2 + 2 * i for i in range(spatial)]
    keep_axes = [0] + [1 + 2 * i for i in range(spatial)] + [len(split) - 1]
    v = v.transpose(keep_axes + win_axes).reshape(n, *out_ext, c, 2 ** spatial)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def back(g, needs):
        gv = np.zeros(v.shape, dtype=g.dtype)
        np.put_along_axis(gv, arg[..., None], g[..., None], axis=-1)
        gv = gv.reshape(n, *out_ext, c, *(2,) * spatial)
        inv = np.argsort(keep_axes + win_axes)
        gv = gv.transpose(inv).reshape(crop.shape)
        gx = np.zeros_like(x.data)
        gx[(slice(None),) + tuple(slice(0, 2 * m) for m in out_ext) + (slice(None),)] = gv
        return (gx,)

    return _emit(op, out, (x,), back)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2; odd trailing rows are dropped."""
    return _maxpool(x, 3, "maxpool3d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2."""
    return _maxpool(x, 2, "maxpool2d")


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over every axis between batch and channels: [N,...,C] -> [N,C]."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_average_pool needs rank >= 3, got {x.shape}")
    axes = tuple(range(1, x.data.ndim - 1))
    cnt = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def back(g, needs):
        gx = np.broadcast_to((g / cnt).reshape(g.shape[0], *(1,) * len(axes), g.shape[1]), x.shape)
        return (gx.astype(x.dtype),)

    return _emit("global_average_pool", out, (x,), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,in] @ weight[out,in].T + bias[out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: x {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def back(g, needs):
        return (g @ weight.data if needs[0] else None,
                g.T @ x.data if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _emit("dense", out, (x, weight, bias), back)


def elman_step(x: Tensor, h: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor) -> Tensor:
    """One Elman recurrence: tanh(x @ w_in.T + h @ w_rec.T + bias)."""
    hid = w_rec.shape[0]
    if (x.data.ndim != 2 or h.data.ndim != 2 or w_in.shape != (hid, x.shape[1])
            or w_rec.shape != (hid, hid) or h.shape != (x.shape[0], hid) or bias.shape != (hid,)):
        raise ShapeError(f"elman_step: x {x.shape}, h {h.shape}, w_in {w_in.shape}, "
                         f"w_rec {w_rec.shape}, bias {bias.shape} do not conform")
    out = np.tanh(x.data @ w_in.data.T + h.data @ w_rec.data.T + bias.data)

    def back(g, needs):
        gz = g * (1 - out * out)
        return (gz @ w_in.data if needs[0] else None,
                gz @ w_rec.data if needs[1] else None,
                gz.T @ x.data if needs[2] else None,
                gz.T @ h.data if needs[3] else None,
                gz.sum(axis=0) if needs[4] else None)

    return _emit("elman_step", out, (x, h, w_in, w_rec, bias), back)


# --------------------------------------------------------------------------- #
# losses


def _check_target(h: np.ndarray, target: np.ndarray) -> None:
    if h.ndim != 2 or target.shape != h.shape:
        raise ShapeError(f"cross_entropy: h {h.shape} and target {target.shape} must both be [N,l]")
    if not np.allclose(target.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("cross_entropy: every target row must sum to 1 (within 1e-6)")


def cross_entropy(h: Tensor, target: np.ndarray) -> Tensor:
    """mean_N of -(1/l) * sum_j target_j * log(max(h_j, LOG_FLOOR)) over probability rows ``h``."""
    target = np.asarray(target, dtype=h.dtype)
    _check_target(h.data, target)
    n, l = h.shape
    hc = np.maximum(h.data, LOG_FLOOR)
    out = np.asarray(-(target * np.log(hc)).sum() / (n * l), dtype=h.dtype)

    def back(g, needs):
        return (g * (-target / (hc * (n * l))) * (h.data > LOG_FLOOR),)

    return _emit("cross_entropy", out, (h,), back)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, reduction: str = "mean") -> Tensor:
    """``cross_entropy(softmax(logits), target)`` fused for stability.

    The value applies the log floor; the gradient is the logit-space gradient
    (1/l)(s * sum(target) - target), which keeps signal for samples whose
    target probability underflows the floor.
    """
    target = np.asarray(target, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logs = z - logz
    _check_target(logs, target)
    n, l = logits.shape
    denom = n * l if reduction == "mean" else l
    logh = np.maximum(logs, np.log(LOG_FLOOR))
    out = np.asarray(-(target * logh).sum() / denom, dtype=logits.dtype)
    s = np.exp(logs)

    def back(g, needs):
        return (g * (s * target.sum(axis=1, keepdims=True) - target) / denom,)

    return _emit("softmax_cross_entropy", out, (logits,), back)


def one_hot(labels, l: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], l), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


# --------------------------------------------------------------------------- #
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    flagged: list[list[tuple[int, ...]]]
    tolerance: float

    @property
    def ok(self) -> bool:
        return not any(self.flagged)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-4,
               tolerance: float = 1e-6, seed: int = 0, floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with a
    fixed random projection. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    proj: list[np.ndarray] = []

    def scalar(*arrs, tape=None):
        ts = [Tensor(a, requires_grad=tape is not None) for a in arrs]
        out = fn(*ts)
        if not proj:
            proj.append(np.random.default_rng(seed).uniform(-1, 1, out.shape))
        loss = sum_all(mul(out, Tensor(proj[0])))
        return ts, loss

    with Tape() as tape:
        ts, loss = scalar(*arrays, tape=tape)
        analytic = tape.gradient(loss, ts)

    max_err, flagged = [], []
    for k, arr in enumerate(arrays):
        errs = []
        bad = []
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = scalar(*arrays)[1].item()
            arr[idx] = orig - step
            fm = scalar(*arrays)[1].item()
            arr[idx] = orig
            num = (fp - fm) / (2 * step)
            a = float(analytic[k][idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            errs.append(err)
            if err > tolerance:
                bad.append(idx)
        max_err.append(max(errs) if errs else 0.0)
        flagged.append(bad)
    return GradCheckReport(max_err, flagged, tolerance)

