"""Differentiable building blocks with handwritten backward passes.

Every functional op ``foo`` returns ``(out, cache)`` and has a matching
``foo_backward(dout, cache)``. Layer classes wrap these, look their
parameters up in a :class:`ParamStore` on each call and accumulate
gradients into it. All maps use ``(B, C, H, W)`` layout.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagicError, NumericError, ShapeError, TruncatedPayloadError, VersionMismatchError

CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# Parameter registry

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray


class ParamStore:
    """Ordered registry ``name -> (value, grad)`` plus Adam state.

    Initial values are drawn from a stream keyed on ``(seed, name)`` so a
    parameter's init does not depend on construction order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Param] = OrderedDict()
        self.step = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, shape, init="uniform", fan_in: int | None = None, bound: float | None = None) -> str:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            value = np.array(init, dtype=self.dtype).reshape(shape)
        elif init == "zeros":
            value = np.zeros(shape, self.dtype)
        elif init == "ones":
            value = np.ones(shape, self.dtype)
        elif init == "uniform":
            if bound is None:
                fan_in = fan_in if fan_in is not None else int(np.prod(shape[1:]) or 1)
                bound = np.sqrt(1.0 / fan_in)
            value = self._rng(name).uniform(-bound, bound, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = Param(value, np.zeros_like(value))
        return name

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params)

    def value(self, name: str) -> np.ndarray:
        return self.params[name].value

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def set(self, name: str, value) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value[...] = value

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad.fill(0)

    def to(self, dtype) -> "ParamStore":
        """Convert every buffer in place (64-bit verification mode)."""
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.value = p.value.astype(self.dtype)
            p.grad = p.grad.astype(self.dtype)
        self._m = {k: v.astype(self.dtype) for k, v in self._m.items()}
        self._v = {k: v.astype(self.dtype) for k, v in self._v.items()}
        return self

    def n_elements(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def save(self, path: str | PathLike) -> None:
        save_checkpoint(self, path)

    def load(self, path: str | PathLike) -> None:
        load_checkpoint(self, path)


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; zeroes gradients afterwards."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p.value)
            store._v[name] = np.zeros_like(p.value)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(p.grad)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)
        p.grad.fill(0)


def save_checkpoint(store: ParamStore, path: str | PathLike) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(store.params))]
    for name, p in store.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(p.value.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | PathLike) -> OrderedDict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated in name")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        if pos + 4 * size > len(raw):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated in {name!r}")
        out[name] = np.frombuffer(raw, "<f4", size, pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    return out


def load_checkpoint(store: ParamStore, path: str | PathLike) -> None:
    """Load values into an already-built store; names and shapes must match."""
    values = read_checkpoint(path)
    missing = [n for n in store.params if n not in values]
    extra = [n for n in values if n not in store.params]
    if missing or extra:
        raise ShapeError(f"checkpoint/model mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, v in values.items():
        store.set(name, v)


# --------------------------------------------------------------------------
# Elementwise ops

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, s):
    return dy * s * (1.0 - s)


def silu(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dy, cache):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def softplus_backward(dy, x):
    return dy * sigmoid(x)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, (s, axis)


def softmax_backward(dy, cache):
    s, axis = cache
    return s * (dy - (dy * s).sum(axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Normalize along ``axis``; gamma/beta broadcast along that axis."""
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    g = gamma.reshape(shape)
    return xhat * g + beta.reshape(shape), (xhat, inv, g, axis)


def layer_norm_backward(dy, cache):
    xhat, inv, g, axis = cache
    red = tuple(i for i in range(dy.ndim) if i != (axis % dy.ndim))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    dxhat = dy * g
    n = xhat.shape[axis]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# Dense and convolution

def dense(x, W, b=None):
    """``x @ W.T + b`` over the last axis; ``W`` is ``(out, in)``."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight fan-in {W.shape[1]}")
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, (x, W)


def dense_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ W
    return dx, dW, db


def mlp(x, W1, b1, W2, b2):
    h, c1 = dense(x, W1, b1)
    a, cs = silu(h)
    y, c2 = dense(a, W2, b2)
    return y, (c1, cs, c2)


def mlp_backward(dy, cache):
    c1, cs, c2 = cache
    da, dW2, db2 = dense_backward(dy, c2)
    dh = silu_backward(da, cs)
    dx, dW1, db1 = dense_backward(dh, c1)
    return dx, dW1, db1, dW2, db2


def _out_size(n, k, s, p):
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise ShapeError(f"conv: (size {n} + 2*{p} - {k}) not divisible by stride {s}")
    return span // s + 1


def conv2d(x, W, b=None, stride=1, padding=0):
    """Cross-correlation. ``x: (B, Cin, H, W)``, ``W: (Cout, Cin, k, k)``."""
    if x.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {W.shape}")
    k = W.shape[2]
    Ho = _out_size(x.shape[2], k, stride, padding)
    Wo = _out_size(x.shape[3], k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        y = np.einsum("bchw,oc->bohw", cols, W[:, :, 0, 0], optimize=True)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # win: (B, Cin, Ho, Wo, k, k)
        y = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y), (x.shape, xp, W, stride, padding, Ho, Wo)


def conv2d_backward(dy, cache):
    xshape, xp, W, s, p, Ho, Wo = cache
    k = W.shape[2]
    db = dy.sum(axis=(0, 2, 3))
    if k == 1:
        cols = xp[:, :, ::s, ::s][:, :, :Ho, :Wo]
        dW = np.einsum("bohw,bchw->oc", dy, cols, optimize=True)[:, :, None, None]
        dcols = np.einsum("bohw,oc->bchw", dy, W[:, :, 0, 0], optimize=True)
        dxp = np.zeros_like(xp)
        dxp[:, :, ::s, ::s][:, :, :Ho, :Wo] = dcols
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        dW = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        # dcols: (B, Ho, Wo, Cin, k, k)
        dcols = np.tensordot(dy, W, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, p:p + xshape[2], p:p + xshape[3]] if p else dxp
    return np.ascontiguousarray(dx), dW, db


def depthwise_conv2d(x, W, b=None, stride=1, padding=0):
    """Per-channel conv; ``W: (C, k, k)``."""
    if x.ndim != 4 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with weight {W.shape}")
    k = W.shape[1]
    Ho = _out_size(x.shape[2], k, stride, padding)
    Wo = _out_size(x.shape[3], k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    y = np.zeros((x.shape[0], x.shape[1], Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            y += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * W[None, :, i, j, None, None]
    if b is not None:
        y += b[None, :, None, None]
    return y, (x.shape, xp, W, stride, padding, Ho, Wo)


def depthwise_conv2d_backward(dy, cache):
    xshape, xp, W, s, p, Ho, Wo = cache
    k = W.shape[1]
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + s * Ho, s), slice(j, j + s * Wo, s))
            dW[:, i, j] = np.einsum("bchw,bchw->c", dy, xp[sl])
            dxp[sl] += dy * W[None, :, i, j, None, None]
    db = dy.sum(axis=(0, 2, 3))
    dx = dxp[:, :, p:p + xshape[2], p:p + xshape[3]] if p else dxp
    return np.ascontiguousarray(dx), dW, db


def upsample_nearest(x, factor=2):
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(dy, factor=2):
    B, C, H, W = dy.shape
    return dy.reshape(B, C, H // factor, factor, W // factor, factor).sum(axis=(3, 5))


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape {pred.shape} != {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# --------------------------------------------------------------------------
# Layers

class Module:
    """Base for layers whose parameters live in a shared store."""

    def __init__(self, store: ParamStore, name: str):
        self.store = store
        self.name = name

    def _add(self, key, shape, init="uniform", fan_in=None, bound=None):
        return self.store.add(f"{self.name}.{key}", shape, init, fan_in, bound)

    def p(self, key):
        return self.store.value(f"{self.name}.{key}")

    def _acc(self, key, g):
        self.store.grad(f"{self.name}.{key}")[...] += g


class Conv2d(Module):
    def __init__(self, store, name, c_in, c_out, k, stride=1, padding=None, init="uniform"):
        super().__init__(store, name)
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        self._add("weight", (c_out, c_in, k, k), init, fan_in=c_in * k * k)
        self._add("bias", (c_out,), "zeros")

    def forward(self, x):
        y, self._cache = conv2d(x, self.p("weight"), self.p("bias"), self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dW, db = conv2d_backward(dy, self._cache)
        self._acc("weight", dW)
        self._acc("bias", db)
        return dx


class DepthwiseConv2d(Module):
    def __init__(self, store, name, channels, k=3, init="uniform"):
        super().__init__(store, name)
        self.padding = k // 2
        self._add("weight", (channels, k, k), init, fan_in=k * k)
        self._add("bias", (channels,), "zeros")

    def forward(self, x):
        y, self._cache = depthwise_conv2d(x, self.p("weight"), self.p("bias"), 1, self.padding)
        return y

    def backward(self, dy):
        dx, dW, db = depthwise_conv2d_backward(dy, self._cache)
        self._acc("weight", dW)
        self._acc("bias", db)
        return dx


class Dense(Module):
    """Affine map over the last axis."""

    def __init__(self, store, name, d_in, d_out, init="uniform", bias=True):
        super().__init__(store, name)
        self.bias = bias
        self._add("weight", (d_out, d_in), init, fan_in=d_in)
        if bias:
            self._add("bias", (d_out,), "zeros")

    def forward(self, x):
        y, self._cache = dense(x, self.p("weight"), self.p("bias") if self.bias else None)
        return y

    def backward(self, dy):
        dx, dW, db = dense_backward(dy, self._cache)
        self._acc("weight", dW)
        if self.bias:
            self._acc("bias", db)
        return dx


class MLP(Module):
    """dense -> silu -> dense."""

    def __init__(self, store, name, d_in, d_hidden, d_out, init_out="uniform"):
        super().__init__(store, name)
        self.fc1 = Dense(store, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Dense(store, f"{name}.fc2", d_hidden, d_out, init=init_out)

    def forward(self, x):
        h = self.fc1.forward(x)
        a, self._act = silu(h)
        return self.fc2.forward(a)

    def backward(self, dy):
        return self.fc1.backward(silu_backward(self.fc2.backward(dy), self._act))


class LayerNorm(Module):
    def __init__(self, store, name, width, axis=-1, eps=1e-5):
        super().__init__(store, name)
        self.axis = axis
        self.eps = eps
        self._add("gamma", (width,), "ones")
        self._add("beta", (width,), "zeros")

    def forward(self, x):
        y, self._cache = layer_norm(x, self.p("gamma"), self.p("beta"), self.eps, self.axis)
        return y

    def backward(self, dy):
        dx, dg, db = layer_norm_backward(dy, self._cache)
        self._acc("gamma", dg)
        self._acc("beta", db)
        return dx
