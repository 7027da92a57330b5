"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers the operation that produced it.
backprop() walks the recorded graph once in reverse topological order and
accumulates vector-Jacobian products into .grad. Everything is double
precision; forward passes are referentially transparent (same inputs give
bit-identical outputs).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "backprop", "add", "sub", "neg", "mul", "scale", "matmul",
    "mean_all", "sum_all", "square", "safe_log", "tanh", "sigmoid",
    "leaky_relu", "reshape", "concat", "conv2d", "upsample", "LOG_FLOOR",
]

LOG_FLOOR = 1e-12  # arguments of log are floored here before taking ln


class Tensor:
    """Graph node: a float64 ndarray plus a gradient accumulator."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no history; gradients stop here."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; graphs can be deep enough to trip the
    # recursion limit during long loss compositions.
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backprop(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(node) into .grad for every node under root."""
    if seed is None:
        seed = np.ones_like(root.data)
    root.grad = np.asarray(seed, dtype=np.float64)
    if root.grad.shape != root.data.shape:
        raise ValueError(
            f"seed gradient shape {root.grad.shape} != output shape {root.data.shape}")
    for node in reversed(_topo_order(root)):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape the operand had before broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data
    return Tensor(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_all(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), (a,),
                  lambda g: (np.full_like(a.data, float(g) / n),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def safe_log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """ln(max(x, floor)); gradient is 1/x above the floor and 0 below."""
    clipped = np.maximum(a.data, floor)
    above = a.data > floor
    return Tensor(np.log(clipped), (a,),
                  lambda g: (np.where(above, g / clipped, 0.0),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(s, (a,), lambda g: (g * s * (1.0 - s),))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    pos = a.data > 0.0
    out = np.where(pos, a.data, alpha * a.data)
    return Tensor(out, (a,), lambda g: (np.where(pos, g, alpha * g),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=axis)
    n = a.data.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [n], axis=axis)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def _same_pad(n: int, k: int, stride: int) -> tuple[int, int]:
    # "same" zero padding: output length is ceil(n / stride)
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    # layout (N, OH, OW, C, KH, KW) so the flattened tail matches w.reshape(c_out, -1)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution, NCHW input, (C_out, C_in, KH, KW) kernel, "same" zero padding."""
    n, c, h, wd = x.data.shape
    c_out, c_in, kh, kw = w.data.shape
    if c_in != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c_in}")
    ph_lo, ph_hi = _same_pad(h, kh, stride)
    pw_lo, pw_hi = _same_pad(wd, kw, stride)
    oh, ow = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    out = out + b.data.reshape(1, c_out, 1, 1)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(w.data.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph_lo:ph_lo + h, pw_lo:pw_lo + wd]
        return gx, gw, gb

    return Tensor(out, (x, w, b), vjp)


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor spatial upsampling on NCHW input."""
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g):
        n, c, h, w = x.data.shape
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return Tensor(out, (x,), vjp)
