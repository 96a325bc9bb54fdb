"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the networks in this package: dense layers,
strided 2-D/1-D convolutions and their transposes, pooling, softmax,
weighted cross-entropy, and an Adam optimizer over a named parameter store.
Everything is float64; forward passes build a tape of closures that
`backward` replays in reverse topological order.
"""

from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, mul_const(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def backward(out: Tensor) -> None:
    """Reverse accumulation from a scalar (or any) output tensor."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for t in reversed(topo):
        if t._bw is not None and t.grad is not None:
            t._bw(t.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise and linear algebra -----------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    return Tensor(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    return Tensor(a.data * b.data, (a, b), bw)


def mul_const(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g * c)
    return Tensor(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where b is a 2-D weight matrix; a may have leading batch dims."""
    if b.data.ndim != 2:
        raise ValueError("matmul right operand must be 2-D")
    k = a.data.shape[-1]

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
    return Tensor(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))
    return Tensor(a.data.reshape(shape), (a,), bw)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        off = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            _accum(p, g[tuple(sl)])
            off += s
    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out.size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.data.shape))
    return Tensor(out, (a,), bw)


def total(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))
    return Tensor(a.data.sum(), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)
    return Tensor(a.data * mask, (a,), bw)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))
    return Tensor(out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - dot))
    return Tensor(p, (a,), bw)


def mse(pred: Tensor, target: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error per coordinate, optionally sample-weighted.

    weights broadcasts against pred; the loss is sum(w * (pred-t)^2) / sum(w)
    with w = 1 everywhere by default.
    """
    diff = pred.data - target
    if weights is None:
        denom = diff.size

        def bw(g):
            _accum(pred, g * 2.0 * diff / denom)
        return Tensor((diff ** 2).sum() / denom, (pred,), bw)
    w = np.broadcast_to(weights, diff.shape)
    denom = max(w.sum(), 1e-12)

    def bww(g):
        _accum(pred, g * 2.0 * w * diff / denom)
    return Tensor((w * diff ** 2).sum() / denom, (pred,), bww)


def weighted_ce(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray) -> Tensor:
    """Class-weighted softmax cross-entropy, weighted-averaged over cells.

    logits (..., C); labels same shape, rows on the simplex (usually one-hot).
    Cell weight is the label-weighted class weight, so with one-hot labels a
    cell contributes w_class * CE / sum-of-cell-weights.
    """
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    wmap = (labels * class_weights).sum(axis=-1)
    denom = max(wmap.sum(), 1e-12)
    loss = -(wmap * (labels * logp).sum(axis=-1)).sum() / denom

    def bw(g):
        p = np.exp(logp)
        _accum(logits, g * wmap[..., None] * (p - labels) / denom)
    return Tensor(loss, (logits,), bw)


# -- convolutions ------------------------------------------------------------

def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: tuple = (1, 1)) -> Tensor:
    """NHWC convolution. w: (kh, kw, Cin, Cout); b: (Cout,)."""
    kh, kw, cin, cout = w.data.shape
    ph, pw = pad
    xp = _pad2d(x.data, ph, pw)
    bsz, hp, wp, _ = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (B, oh, ow, Cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * oh * ow, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm + b.data).reshape(bsz, oh, ow, cout)

    def bw(g):
        gm = g.reshape(bsz * oh * ow, cout)
        _accum(b, gm.sum(axis=0))
        _accum(w, (cols.T @ gm).reshape(w.data.shape))
        dcols = (gm @ wm.T).reshape(bsz, oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, i, j]
        _accum(x, dxp[:, ph:hp - ph, pw:wp - pw] if (ph or pw) else dxp)
    return Tensor(out, (x, w, b), bw)


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: tuple = (1, 1),
    out_hw: tuple | None = None,
) -> Tensor:
    """Transposed NHWC convolution. w: (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = w.data.shape
    ph, pw = pad
    bsz, h, wd, _ = x.data.shape
    if out_hw is None:
        out_hw = (stride * h, stride * wd)
    oh, ow = out_hw
    hp, wp = oh + 2 * ph, ow + 2 * pw
    yp = np.zeros((bsz, hp, wp, cout))
    xm = x.data.reshape(bsz * h * wd, cin)
    wm = w.data.reshape(kh, kw, cin, cout)
    contrib = {}
    for i in range(kh):
        for j in range(kw):
            t = (xm @ wm[i, j]).reshape(bsz, h, wd, cout)
            contrib[(i, j)] = t
            yp[:, i:i + stride * h:stride, j:j + stride * wd:stride] += t
    out = yp[:, ph:hp - ph, pw:wp - pw] if (ph or pw) else yp
    out = out + b.data

    def bw(g):
        _accum(b, g.sum(axis=(0, 1, 2)))
        gp = _pad2d(g, ph, pw)
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gij = gp[:, i:i + stride * h:stride, j:j + stride * wd:stride]
                gm = gij.reshape(bsz * h * wd, cout)
                dx += (gm @ wm[i, j].T).reshape(bsz, h, wd, cin)
                dw[i, j] = xm.T @ gm
        _accum(x, dx)
        _accum(w, dw)
    return Tensor(out, (x, w, b), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """NLC convolution over the sequence axis via the 2-D kernel."""
    k, cin, cout = w.data.shape
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(w, (k, 1, cin, cout))
    y = conv2d(x4, w4, b, stride=stride, pad=(pad, 0))
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1,
                     out_len: int | None = None) -> Tensor:
    k, cin, cout = w.data.shape
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(w, (k, 1, cin, cout))
    ol = out_len if out_len is not None else stride * x.shape[1]
    y = conv2d_transpose(x4, w4, b, stride=stride, pad=(pad, 0), out_hw=(ol, 1))
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    bsz, h, w, c = x.data.shape
    if h % k or w % k:
        raise ValueError("pool size must divide spatial dims")
    out = x.data.reshape(bsz, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def bw(g):
        g4 = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        _accum(x, g4)
    return Tensor(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C)."""
    return mean(reshape(x, (x.shape[0], x.shape[1] * x.shape[2], x.shape[3])), axis=1)


def sinusoidal_embedding(i: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Standard sin/cos positional embedding for integer steps; (N, dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(i, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -- parameters and optimization --------------------------------------------

class ParamStore:
    """Named parameter segments over float64 arrays.

    tensor() hands out leaf tensors and records them so grads() can collect
    gradients after backward; flatten()/load_flat() give the canonical flat
    view used for serialization and finite-difference testing.
    """

    def __init__(self):
        self._p: dict[str, np.ndarray] = {}
        self._live: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._p:
            raise KeyError(f"duplicate parameter segment: {name}")
        self._p[name] = np.asarray(array, dtype=np.float64)

    def __contains__(self, name):
        return name in self._p

    def names(self) -> list[str]:
        return list(self._p)

    def get(self, name: str) -> np.ndarray:
        return self._p[name]

    def set(self, name: str, array: np.ndarray) -> None:
        if array.shape != self._p[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        self._p[name] = np.asarray(array, dtype=np.float64)

    def begin(self) -> None:
        """Start a fresh forward pass (drops leaf tensors from the last one)."""
        self._live = {}

    def tensor(self, name: str) -> Tensor:
        if name not in self._live:
            self._live[name] = Tensor(self._p[name])
        return self._live[name]

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self._live.items():
            if t.grad is not None:
                out[name] = t.grad
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._p.values())

    def segment_index(self) -> dict[str, tuple[int, list[int]]]:
        idx = {}
        off = 0
        for name, a in self._p.items():
            idx[name] = (off, list(a.shape))
            off += a.size
        return idx

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._p.values()]) if self._p else np.empty(0)

    def load_flat(self, flat: np.ndarray) -> None:
        off = 0
        for name, a in self._p.items():
            self._p[name] = np.asarray(flat[off:off + a.size], dtype=np.float64).reshape(a.shape)
            off += a.size
        if off != len(flat):
            raise ValueError("flat array size mismatch")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, a in self._p.items():
            other.add(name, a.copy())
        return other


class Adam:
    """Adaptive moment estimation over a ParamStore."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            self._m[name] = b1 * self._m[name] + (1 - b1) * g
            self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
            mhat = self._m[name] / (1 - b1 ** self.t)
            vhat = self._v[name] / (1 - b2 ** self.t)
            store.set(name, store.get(name) - self.lr * mhat / (np.sqrt(vhat) + self.eps))


def snapshot_state(epoch: int, store: ParamStore, opt: Adam, rng) -> dict:
    """Picklable training-state snapshot for checkpoint/resume."""
    return {
        "epoch": epoch,
        "flat": store.flatten(),
        "opt": {
            "t": opt.t,
            "m": {k: v.copy() for k, v in opt._m.items()},
            "v": {k: v.copy() for k, v in opt._v.items()},
        },
        "rng": rng.bit_generator.state,
    }


def restore_state(snap: dict, store: ParamStore, opt: Adam, rng) -> int:
    """Load a snapshot in place; returns the next epoch to run."""
    store.load_flat(snap["flat"])
    opt.t = snap["opt"]["t"]
    opt._m = {k: v.copy() for k, v in snap["opt"]["m"].items()}
    opt._v = {k: v.copy() for k, v in snap["opt"]["v"].items()}
    rng.bit_generator.state = snap["rng"]
    return snap["epoch"] + 1


def he_init(rng, *shape, fan_in: int | None = None) -> np.ndarray:
    fi = fan_in if fan_in is not None else int(np.prod(shape[:-1]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / max(fi, 1))
