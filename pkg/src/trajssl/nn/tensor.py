"""A small reverse-mode autodiff engine over numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
``backward()`` on a scalar walks the graph in reverse topological order
and accumulates into ``.grad`` of every leaf that requires it.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.data.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.data.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers adopt the tensor's dtype so float32 graphs stay float32
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.data.dtype)
    return as_tensor(a, b.data.dtype), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit length; gradient is the tangent projection over the norm."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot * out) / denom,)

    return _node(out, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return (g @ weight.data, g.T @ x.data, None if bias is None else g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.reshape(n * h * w, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution on channels-last input.

    ``x`` is (N, H, W, C); ``weight`` is (out, in, k, k) with odd k.
    """
    n, h, w, c = x.shape
    cout, cin, k, _ = weight.shape
    if cin != c or k % 2 == 0:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin} (k={k})")
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)

    def backward(g):
        go = g.reshape(-1, cout)
        g_w = (go.T @ cols).reshape(weight.shape)
        g_b = None if bias is None else go.sum(axis=0)
        if not x.requires_grad:
            return None, g_w, g_b
        dcols = (go @ wmat).reshape(n, h, w, c, k, k)
        p = k // 2
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        return dxp[:, p:p + h, p:p + w, :], g_w, g_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling on channels-last input."""
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d: spatial size {h}x{w} not divisible by {size}")
    scale = 1.0 / (size * size)
    d = x.data
    out = sum(d[:, i::size, j::size, :] for i in range(size) for j in range(size)) * d.dtype.type(scale)

    def backward(g):
        gx = np.empty_like(d)
        gs = g * g.dtype.type(scale)
        for i in range(size):
            for j in range(size):
                gx[:, i::size, j::size, :] = gs
        return (gx,)

    return _node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of channels-last input."""
    return tmean(x, axis=(1, 2))


def loss_node(inputs: Sequence[Tensor], value: float, gradients: Sequence[np.ndarray]) -> Tensor:
    """Wrap a scalar with precomputed input gradients as a graph node."""
    dtype = inputs[0].data.dtype
    grads = [np.asarray(gr, dtype=dtype) for gr in gradients]
    return _node(np.asarray(value, dtype=dtype), tuple(inputs),
                 lambda g: tuple(g * gr for gr in grads))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    rows = np.arange(n)
    value = -np.mean(np.log(np.maximum(p[rows, labels], np.finfo(p.dtype).tiny)))
    g = p.copy()
    g[rows, labels] -= 1.0
    return loss_node([logits], value, [g / n])


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=pred.data.dtype))
    return (diff * diff).mean()
