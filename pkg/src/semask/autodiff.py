"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records, for every derived value, a closure
that routes the output gradient back to its parents. backward() runs the
closures in reverse topological order. Only the ops the enhancement and
alignment networks need are implemented.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery ---------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        # iterative topo sort; recurrent graphs get too deep for recursion
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # free intermediate grads to bound memory
                if not node.requires_grad:
                    node.grad = None

    def _accumulate(self, grad):
        self.grad = grad if self.grad is None else self.grad + grad

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad or other._parents:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd,
                      requires_grad=self.requires_grad or other.requires_grad)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)
        return Tensor(-self.data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd,
                      requires_grad=self.requires_grad or other.requires_grad)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return (self ** -1.0) * other

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent

        def bwd(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data @ other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad or other._parents:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd,
                      requires_grad=self.requires_grad or other.requires_grad)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        old = self.data.shape
        out_data = self.data.reshape(*shape)

        def bwd(g):
            self._accumulate(g.reshape(old))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def transpose(self, *axes):
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def bwd(g):
            self._accumulate(g.transpose(inv))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                grad = np.broadcast_to(g, self.data.shape)
            elif keepdims:
                grad = np.broadcast_to(g, self.data.shape)
            else:
                grad = np.broadcast_to(np.expand_dims(g, axis), self.data.shape)
            self._accumulate(grad.astype(self.dtype, copy=True))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accumulate(g * out_data)

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def log(self):
        out_data = np.log(self.data)

        def bwd(g):
            self._accumulate(g / self.data)

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def sqrt(self):
        return self ** 0.5

    def abs(self):
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def bwd(g):
            self._accumulate(g * sign)

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def bwd(g):
            self._accumulate(g * (self.data > 0))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def swish(self):
        return self * self.sigmoid()

    def clamp_min(self, lo: float):
        out_data = np.maximum(self.data, lo)

        def bwd(g):
            self._accumulate(g * (self.data > lo))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            self._accumulate(out_data * (g - dot))

        return Tensor(out_data, _parents=(self,), _backward=bwd,
                      requires_grad=self.requires_grad)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._parents:
                t._accumulate(piece)

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd,
                  requires_grad=any(t.requires_grad for t in tensors))


def stack(tensors, axis=0):
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad or t._parents:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd,
                  requires_grad=any(t.requires_grad for t in tensors))


def conv2d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2-D convolution, stride 1, zero same-padding.

    x: [C_in, T, F], w: [C_out, C_in, kh, kw] (kh, kw odd), b: [C_out].
    Returns [C_out, T, F].
    """
    cin, t_len, f_len = x.data.shape
    cout, _, kh, kw = w.data.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    # patches[t, f, c, i, j] = xp[c, t+i, f+j]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(t_len * f_len, cin * kh * kw)
    w2d = w.data.reshape(cout, -1)
    out_data = (cols @ w2d.T).reshape(t_len, f_len, cout).transpose(2, 0, 1)
    out_data = out_data + b.data[:, None, None]

    def bwd(g):
        g2d = g.transpose(1, 2, 0).reshape(t_len * f_len, cout)
        if w.requires_grad or w._parents:
            w._accumulate((g2d.T @ cols).reshape(w.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad or x._parents:
            gcols = (g2d @ w2d).reshape(t_len, f_len, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + t_len, j:j + f_len] += gcols[:, :, :, i, j].transpose(2, 0, 1)
            x._accumulate(gxp[:, ph:ph + t_len, pw:pw + f_len])

    return Tensor(out_data, _parents=(x, w, b), _backward=bwd,
                  requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)


def depthwise_conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time, stride 1, zero same-padding.

    x: [T, C], w: [K, C] (K odd), b: [C]. Returns [T, C].
    """
    t_len, ch = x.data.shape
    k = w.data.shape[0]
    p = k // 2
    xp = np.pad(x.data, ((p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # [T, C, K]
    out_data = np.einsum("tck,kc->tc", win, w.data) + b.data

    def bwd(g):
        if w.requires_grad or w._parents:
            w._accumulate(np.einsum("tck,tc->kc", win, g))
        if b.requires_grad or b._parents:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad or x._parents:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[i:i + t_len] += g * w.data[i]
            x._accumulate(gxp[p:p + t_len])

    return Tensor(out_data, _parents=(x, w, b), _backward=bwd,
                  requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gain + bias


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (eval mode) or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)
