"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every value is a 4-D (batch, channels, height, width) array of float64.
Operations record tape nodes on their outputs; ``backward`` walks the tape
in reverse construction order, which is a valid topological order because
a tensor is always created after its inputs. All reductions use numpy's
deterministic accumulation, so repeated runs are bit-identical.

Vectors (biases, pooled features) are carried as (1, C, 1, 1) or
(B, C, 1, 1) tensors; dense-layer weights as (out, in, 1, 1); scalars as
(1, 1, 1, 1).
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError

_ids = itertools.count()


class TapeNode:
    """One recorded operation: inputs plus a closure computing input grads."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn  # (g: ndarray) -> tuple of per-input ndarrays or None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are 4-D (B,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values (copied)."""
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars stay raw floats to keep the tape small
    def __add__(self, other):
        return _add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return _add_scalar(neg(self), other)

    def __mul__(self, other):
        return _mul_scalar(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _mul_scalar(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def _result(data, op, inputs, grad_fn_factory):
    """Wrap op output; record a tape node only when a gradient can flow."""
    out = Tensor(data)
    needs = tuple(t.requires_grad for t in inputs)
    if any(needs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, grad_fn_factory(needs))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tape ancestor of a scalar loss."""
    if loss.data.shape != (1, 1, 1, 1):
        raise UsageError(f"backward needs a 1x1x1x1 scalar loss, got {loss.shape}")
    order = _topo(loss)
    loss.grad = np.ones((1, 1, 1, 1))
    for t in reversed(order):
        node, g = t.node, t.grad
        if node is None or g is None:
            continue
        grads = node.grad_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gi.copy() if gi.base is not None or gi is g else gi
            else:
                inp.grad += gi


def _topo(root: Tensor):
    """Tape ancestors of root, sorted by creation id (a topological order)."""
    seen = {root.tid: root}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for inp in t.node.inputs:
            if inp.tid not in seen:
                seen[inp.tid] = inp
                stack.append(inp)
    return [seen[k] for k in sorted(seen)]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from `shape`."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def factory(needs):
        def grad_fn(g):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(g, b.shape) if needs[1] else None)
        return grad_fn

    return _result(data, "add", (a, b), factory)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def factory(needs):
        def grad_fn(g):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(-g, b.shape) if needs[1] else None)
        return grad_fn

    return _result(data, "sub", (a, b), factory)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def factory(needs):
        ad, bd = a.data, b.data

        def grad_fn(g):
            return (_unbroadcast(g * bd, a.shape) if needs[0] else None,
                    _unbroadcast(g * ad, b.shape) if needs[1] else None)
        return grad_fn

    return _result(data, "mul", (a, b), factory)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def factory(needs):
        ad, bd = a.data, b.data

        def grad_fn(g):
            ga = _unbroadcast(g / bd, a.shape) if needs[0] else None
            gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if needs[1] else None
            return ga, gb
        return grad_fn

    return _result(data, "div", (a, b), factory)


def neg(a: Tensor) -> Tensor:
    def factory(needs):
        return lambda g: (-g,)

    return _result(-a.data, "neg", (a,), factory)


def _add_scalar(a: Tensor, c) -> Tensor:
    def factory(needs):
        return lambda g: (g,)

    return _result(a.data + float(c), "add_s", (a,), factory)


def _mul_scalar(a: Tensor, c) -> Tensor:
    c = float(c)

    def factory(needs):
        return lambda g: (g * c,)

    return _result(a.data * c, "mul_s", (a,), factory)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def factory(needs):
        keep = a.data > 0.0
        return lambda g: (g * keep,)

    return _result(data, "relu", (a,), factory)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def factory(needs):
        return lambda g: (g * data * (1.0 - data),)

    return _result(data, "sigmoid", (a,), factory)


def log(a: Tensor) -> Tensor:
    def factory(needs):
        ad = a.data
        return lambda g: (g / ad,)

    return _result(np.log(a.data), "log", (a,), factory)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def factory(needs):
        return lambda g: (g / (2.0 * data),)

    return _result(data, "sqrt", (a,), factory)


def softmax_channels(a: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def factory(needs):
        def grad_fn(g):
            gy = g * data
            return (gy - data * gy.sum(axis=1, keepdims=True),)
        return grad_fn

    return _result(data, "softmax", (a,), factory)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    data = np.full((1, 1, 1, 1), a.data.sum())

    def factory(needs):
        shape = a.shape
        return lambda g: (np.broadcast_to(g, shape),)

    return _result(data, "sum", (a,), factory)


def sum_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.sum(axis=axes, keepdims=True)

    def factory(needs):
        shape = a.shape
        return lambda g: (np.broadcast_to(g, shape),)

    return _result(data, "sum_axes", (a,), factory)


def mean_all(a: Tensor) -> Tensor:
    return _mul_scalar(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# structured layers

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation); weight is (outC, inC, kH, kW)."""
    if stride < 1 or pad < 0:
        raise UsageError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    B, C, H, W = x.shape
    O, Ci, kH, kW = weight.shape
    if Ci != C:
        raise DimensionError(
            f"conv2d channel mismatch: input has {C} channels (axis 1), weight expects {Ci} (axis 1)")
    if bias.shape != (1, O, 1, 1):
        raise DimensionError(f"conv2d bias must be (1,{O},1,1), got {bias.shape}")
    Ho = (H + 2 * pad - kH) // stride + 1
    Wo = (W + 2 * pad - kW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {H}x{W}, kernel {kH}x{kW}, pad {pad}, stride {stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kH, kW) -> (B, Ho*Wo, C*kH*kW) patch matrix
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * kH * kW)
    wmat = weight.data.reshape(O, -1)
    out = col @ wmat.T
    data = out.transpose(0, 2, 1).reshape(B, O, Ho, Wo) + bias.data

    def factory(needs):
        saved_col = col if needs[1] else None  # only the weight grad needs patches

        def grad_fn(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B, Ho * Wo, O)
            gx = gw = gb = None
            if needs[0]:
                dcol = (g2 @ wmat).reshape(B, Ho, Wo, C, kH, kW).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
                for u in range(kH):
                    for v in range(kW):
                        dxp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += dcol[..., u, v]
                gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
            if needs[1]:
                gw = np.tensordot(g2, saved_col, axes=([0, 1], [0, 1])).reshape(O, C, kH, kW)
            if needs[2]:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1)
            return gx, gw, gb
        return grad_fn

    return _result(data, "conv2d", (x, weight, bias), factory)


def maxpool2x2(x: Tensor):
    """Non-overlapping 2x2 max pool. Returns (pooled, window argmax indices).

    Indices are 0..3 per window in row-major order; ties go to the first
    (row-major) element.
    """
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def factory(needs):
        def grad_fn(g):
            gw = np.zeros((B, C, H // 2, W // 2, 4))
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
            return (gx,)
        return grad_fn

    return _result(data, "maxpool", (x,), factory), idx


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; each element becomes a 2x2 block."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def factory(needs):
        B, C, H, W = x.shape

        def grad_fn(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)
        return grad_fn

    return _result(data, "upsample", (x,), factory)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on channel vectors: (B,C,1,1) x (O,C,1,1) -> (B,O,1,1)."""
    B, C, H, W = x.shape
    if (H, W) != (1, 1):
        raise DimensionError(f"dense input must be (B,C,1,1), got {x.shape}")
    O, Ci = weight.shape[:2]
    if Ci != C:
        raise DimensionError(f"dense weight expects {Ci} inputs (axis 1), vector has {C}")
    if bias.shape != (1, O, 1, 1):
        raise DimensionError(f"dense bias must be (1,{O},1,1), got {bias.shape}")
    xm = x.data.reshape(B, C)
    wm = weight.data.reshape(O, Ci)
    data = (xm @ wm.T + bias.data.reshape(1, O)).reshape(B, O, 1, 1)

    def factory(needs):
        def grad_fn(g):
            gm = g.reshape(B, O)
            gx = (gm @ wm).reshape(B, C, 1, 1) if needs[0] else None
            gw = (gm.T @ xm).reshape(O, Ci, 1, 1) if needs[1] else None
            gb = gm.sum(axis=0).reshape(1, O, 1, 1) if needs[2] else None
            return gx, gw, gb
        return grad_fn

    return _result(data, "dense", (x, weight, bias), factory)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions, per channel: (B,C,H,W) -> (B,C,1,1)."""
    B, C, H, W = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def factory(needs):
        scale = 1.0 / (H * W)

        def grad_fn(g):
            return (np.broadcast_to(g * scale, (B, C, H, W)),)
        return grad_fn

    return _result(data, "gap", (x,), factory)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel of x by a per-channel factor (B or 1, C, 1, 1)."""
    if scale.shape[1] != x.shape[1] or scale.shape[2:] != (1, 1):
        raise DimensionError(
            f"channel_scale vector must be (B,{x.shape[1]},1,1), got {scale.shape}")
    return mul(x, scale)
