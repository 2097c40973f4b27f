"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node holding its inputs and a closure that pushes
the output gradient back to them.  :meth:`Tensor.backward` walks the graph
in reverse topological order.  Arithmetic is float64 throughout.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "stack_rows",
    "conv2d",
    "maxpool2d",
    "global_avg_pool",
    "linear",
    "relu",
    "leaky_relu",
    "l2_normalize_rows",
    "correlation",
    "logsumexp",
    "where",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents: Iterable["Tensor"], backward) -> "Tensor":
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not part of a differentiable graph")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
        return Tensor._make(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self):
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Max along one axis; the gradient goes to the first maximal entry."""
        idx = np.argmax(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        shape = self.shape

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros(shape)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            return (full,)

        return Tensor._make(out if keepdims else np.squeeze(out, axis), (self,), back)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._make(self.data[key], (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat([as_tensor(t).reshape(1, *as_tensor(t).shape) for t in tensors], axis=0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """``x`` for ``x > 0`` else ``slope * x``; ``slope = 0`` is :func:`relu`."""
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def logsumexp(x: Tensor, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """``log Σ exp(x)`` along ``axis``; entries where ``mask`` is False are excluded."""
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = np.max(data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._make(np.squeeze(out, axis), (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    return out if bias is None else out + bias


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"l2_normalize_rows expects a 2-D tensor, got {x.shape}")
    data = x.data
    n = np.sqrt((data * data).sum(axis=1, keepdims=True))
    n = np.maximum(n, eps)
    y = data / n

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,)

    return Tensor._make(y, (x,), back)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' zero padding (output size ``ceil(h / stride)``).

    ``x`` is ``(b, c, h, w)``; ``weight`` is ``(o, c, k, k)`` with odd ``k``.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    b, c, h, w = x.shape
    o, _, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d needs square odd kernels")
    pad = k // 2
    oh, ow = -(-h // stride), -(-w // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wd = weight.data
    # (b, c, oh, ow, k, k) view -> contiguous im2col matrix
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * k * k)
    out = (cols @ wd.reshape(o, -1).T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    span_h, span_w = stride * (oh - 1) + 1, stride * (ow - 1) + 1

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ wd.reshape(o, -1)).reshape(b, oh, ow, c, k, k)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, :, dy : dy + span_h : stride, dx : dx + span_w : stride] += gcols[:, :, :, :, dy, dx].transpose(
                    0, 3, 1, 2
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, back)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size × size`` max pooling; trailing rows/cols are dropped."""
    b, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than window {size}")
    crop = x.data[:, :, : oh * size, : ow * size]
    win = crop.reshape(b, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh * size, ow * size)
        full = np.zeros(x.shape)
        full[:, :, : oh * size, : ow * size] = gw
        return (full,)

    return Tensor._make(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """``(b, c, h, w) -> (b, c)``."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D tensor, got {x.shape}")
    return x.mean(axis=(2, 3))


def correlation(f1: Tensor, f2: Tensor, max_disp: int) -> Tensor:
    """Cost volume ``(b, (2d+1)², h, w)`` of channel-averaged feature products.

    Channel ``(dy + d) * (2d + 1) + (dx + d)`` holds
    ``mean_c f1[:, c, i, j] * f2[:, c, i + dy, j + dx]``; shifted positions
    outside the map contribute 0.
    """
    if f1.shape != f2.shape or f1.ndim != 4:
        raise ValueError(f"correlation: shapes {f1.shape} and {f2.shape} must match and be 4-D")
    b, c, h, w = f1.shape
    d = int(max_disp)
    if d < 1 or d >= min(h, w):
        raise ValueError(f"max displacement {d} must be in [1, {min(h, w) - 1}]")
    a, bb = f1.data, f2.data
    n = 2 * d + 1
    bp = np.pad(bb, ((0, 0), (0, 0), (d, d), (d, d)))
    # win[b, c, i, j, dy + d, dx + d] = f2[b, c, i + dy, j + dx]
    win = sliding_window_view(bp, (n, n), axis=(2, 3))
    out = np.einsum("bchw,bchwyx->byxhw", a, win, optimize=True).reshape(b, n * n, h, w) / c

    def back(g):
        g5 = g.reshape(b, n, n, h, w) / c
        ga = np.einsum("byxhw,bchwyx->bchw", g5, win, optimize=True)
        gbp = np.zeros_like(bp)
        for dy in range(n):
            for dx in range(n):
                gbp[:, :, dy : dy + h, dx : dx + w] += g5[:, None, dy, dx] * a
        return ga, gbp[:, :, d : d + h, d : d + w]

    return Tensor._make(out, (f1, f2), back)
