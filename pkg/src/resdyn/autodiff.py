"""Minimal dense-tensor reverse-mode autodiff and Adam optimizer.

Define-by-run: every op returns a Tensor holding the forward value and a
closure that scatters the upstream gradient to its parents. The graph is
rebuilt each minibatch and freed with it. float64 everywhere: the models
trained here are tiny and Cholesky robustness matters more than speed.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .core import ValidationError

SQRT5 = np.sqrt(5.0)


class Tensor:
    """A node in the computation graph: value, lazy gradient, backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        # parents are only kept while a gradient path exists
        self._parents = _parents if self.requires_grad else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        x = self
        out = Tensor(x.data[key], _parents=(x,))
        if out.requires_grad:
            def _bwd():
                gx = np.zeros_like(x.data)
                np.add.at(gx, key, out.grad)
                x._acc(gx)
            out._backward = _bwd
        return out

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'}, name={self.name})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss through the whole graph."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ------------------------------------------------

def _binary(a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ValidationError(f"shape mismatch: {a.data.shape} vs {b.data.shape}") from exc
    out = Tensor(data, _parents=(a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                a._acc(_unbroadcast(da(g, a.data, b.data), a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(db(g, a.data, b.data), b.data.shape))
        out._backward = _bwd
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


# -- elementwise unary -------------------------------------------------

def _unary(x, fwd, dfn):
    x = as_tensor(x)
    data = fwd(x.data)
    out = Tensor(data, _parents=(x,))
    if out.requires_grad:
        def _bwd():
            x._acc(dfn(out.grad, x.data, out.data))
        out._backward = _bwd
    return out


def power(x, p: float):
    return _unary(x, lambda v: v ** p, lambda g, v, y: g * p * v ** (p - 1))


def exp(x):
    return _unary(x, np.exp, lambda g, v, y: g * y)


def log(x):
    return _unary(x, np.log, lambda g, v, y: g / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, y: g * 0.5 / y)


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, y: g * (1.0 - y * y))


def sigmoid(x):
    return _unary(x, expit, lambda g, v, y: g * y * (1.0 - y))


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, y: g * (v > 0))


def matern52(sqdist):
    """Matern-5/2 radial profile as a function of the squared distance.

    Expressed on s = r^2 so the derivative stays finite at s = 0 (the raw
    chain rule through sqrt(0) would produce NaN on kernel diagonals).
    """
    def fwd(s):
        r = np.sqrt(np.maximum(s, 0.0))
        return (1.0 + SQRT5 * r + (5.0 / 3.0) * s) * np.exp(-SQRT5 * r)

    def dfn(g, s, y):
        r = np.sqrt(np.maximum(s, 0.0))
        return g * (-(5.0 / 6.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r))

    return _unary(sqdist, fwd, dfn)


# -- reductions and shape ops -----------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._acc(np.broadcast_to(g, x.data.shape))
        out._backward = _bwd
    return out


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[i] for i in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), _parents=(x,))
    if out.requires_grad:
        def _bwd():
            x._acc(out.grad.reshape(x.data.shape))
        out._backward = _bwd
    return out


def transpose(x, axes=None):
    x = as_tensor(x)
    out = Tensor(x.data.transpose(axes), _parents=(x,))
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        def _bwd():
            x._acc(out.grad.transpose(inv))
        out._backward = _bwd
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    if out.requires_grad:
        sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
        def _bwd():
            pieces = np.split(out.grad, sizes, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._acc(g)
        out._backward = _bwd
    return out


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError(
            f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ValidationError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}") from exc
    out = Tensor(data, _parents=(a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                a._acc(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        out._backward = _bwd
    return out


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            x._acc((g - (g * y).sum(axis=axis, keepdims=True)) * y)
        out._backward = _bwd
    return out


def _phi_half_diag(m: np.ndarray) -> np.ndarray:
    p = np.tril(m)
    p[np.diag_indices_from(p)] *= 0.5
    return p


def cholesky(a):
    """Lower Cholesky factor; the input must be built symmetrically upstream
    (the returned adjoint is symmetrized)."""
    a = as_tensor(a)
    l_data = np.linalg.cholesky(a.data)
    out = Tensor(l_data, _parents=(a,))
    if out.requires_grad:
        def _bwd():
            p = _phi_half_diag(l_data.T @ out.grad)
            tmp = solve_triangular(l_data, p, lower=True, trans="T")
            s = solve_triangular(l_data, tmp.T, lower=True, trans="T").T
            a._acc(0.5 * (s + s.T))
        out._backward = _bwd
    return out


def trisolve(l, b, trans: bool = False):
    """Solve L x = b (or L^T x = b when trans) for lower-triangular L."""
    l, b = as_tensor(l), as_tensor(b)
    if b.data.ndim != 2 or l.data.ndim != 2:
        raise ValidationError(f"trisolve needs 2-D operands, got {l.data.shape}, {b.data.shape}")
    x_data = solve_triangular(l.data, b.data, lower=True, trans="T" if trans else "N")
    out = Tensor(x_data, _parents=(l, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if trans:
                gb = solve_triangular(l.data, g, lower=True, trans="N")
                gl = -x_data @ gb.T
            else:
                gb = solve_triangular(l.data, g, lower=True, trans="T")
                gl = -gb @ x_data.T
            if l.requires_grad:
                l._acc(np.tril(gl))
            if b.requires_grad:
                b._acc(gb)
        out._backward = _bwd
    return out


# -- network ops -------------------------------------------------------

def conv1d(x, w, bias=None, stride: int = 1, dilation: int = 1):
    """1-D convolution. x: (C_in, L) or (B, C_in, L); w: (C_out, C_in, K).

    Output length floor((L - dilation*(K-1) - 1)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.data.ndim != 3 or xd.shape[1] != w.data.shape[1]:
        raise ValidationError(
            f"conv1d shape mismatch: input {x.data.shape}, kernel {w.data.shape}")
    _, c_in, length = xd.shape
    c_out, _, k = w.data.shape
    l_out = conv1d_output_length(length, k, stride, dilation)
    if l_out < 1:
        raise ValidationError(
            f"conv1d input length {length} too short for kernel {k}, "
            f"stride {stride}, dilation {dilation} "
            f"(needs length >= {dilation * (k - 1) + 1})")
    idx = (np.arange(l_out) * stride)[:, None] + np.arange(k)[None, :] * dilation
    cols = xd[:, :, idx]                                  # (B, C_in, L_out, K)
    data = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data[:, None]
    parents = (x, w) if bias is None else (x, w, bias)
    out = Tensor(data[0] if squeeze else data, _parents=parents)
    if out.requires_grad:
        def _bwd():
            g = out.grad[None] if squeeze else out.grad
            if w.requires_grad:
                w._acc(np.einsum("bclk,bol->ock", cols, g, optimize=True))
            if x.requires_grad:
                gcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
                gx = np.zeros_like(xd)
                np.add.at(gx, (slice(None), slice(None), idx), gcols)
                x._acc(gx[0] if squeeze else gx)
            if bias is not None and bias.requires_grad:
                bias._acc(g.sum(axis=(0, 2)))
        out._backward = _bwd
    return out


def conv1d_output_length(length: int, kernel: int, stride: int, dilation: int) -> int:
    return (length - dilation * (kernel - 1) - 1) // stride + 1


def dropout(x, rate: float, rng: np.random.Generator | None = None,
            train: bool = False):
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return as_tensor(x)
    if rng is None:
        raise ValidationError("dropout in train mode needs an rng")
    x = as_tensor(x)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


def affine(x, w, b):
    """x @ w + b for 2-D x."""
    return add(matmul(x, w), b)


# -- optimizer ---------------------------------------------------------

class Adam:
    """Adam with bias correction. A step with any non-finite gradient is
    skipped entirely and counted."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValidationError("Adam got a non-trainable tensor")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped_steps = 0

    def step(self) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoints -------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """JSON header line listing (name, shape, offset), then the flat
    little-endian float64 payload; offsets count elements."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(a).astype("<f8").tobytes())
        offset += a.size
    header = json.dumps({"format": "f64-le", "entries": entries})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    out = {}
    for e in header["entries"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = payload[e["offset"]:e["offset"] + size] \
            .reshape(e["shape"]).astype(np.float64)
    return out
