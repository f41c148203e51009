"""Reverse-mode automatic differentiation over numpy arrays.

Only the operators the expression model needs are provided. Every op records
its parents and a closure that maps the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


_TINY = np.finfo(np.float64).tiny


def _flush(x: np.ndarray) -> np.ndarray:
    """Zero subnormal values in place; arithmetic on them is extremely slow."""
    x[np.abs(x) < _TINY] = 0.0
    return x


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def reciprocal(a) -> Tensor:
    out = 1.0 / a.data
    return Tensor(out, parents=(a,), backward=lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, parents=(a, b), backward=backward)


def transpose(a, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor(out, parents=(a,), backward=lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    src = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,), backward=lambda g: (g.reshape(src),))


def getitem(a, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], parents=(a,), backward=backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def relu(a) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), backward=lambda g: (g * mask,))


def exp(a) -> Tensor:
    out = _flush(np.exp(a.data))
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def log(a) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * 0.5 / out,))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = _flush(np.exp(a.data - m))
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return Tensor(out if keepdims else np.squeeze(out, axis), parents=(a,), backward=backward)


def softmax(a, axis=-1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = _flush(np.exp(a.data - m))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, parents=(a,), backward=backward)


def log_softmax(a, axis=-1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


def l1_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    """Divide by the sum along ``axis``; assumes nonnegative input."""
    s = a.data.sum(axis=axis, keepdims=True) + eps
    out = a.data / s

    def backward(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) / s,)

    return Tensor(out, parents=(a,), backward=backward)


def l2_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    out = a.data / n

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return Tensor(out, parents=(a,), backward=backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  backward=lambda g: tuple(np.split(g, sizes, axis=axis)))


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation. ``x``: (B, C, H, W); ``w``: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {C2}")
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)
