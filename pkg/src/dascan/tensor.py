"""Dense tensors with reverse-mode automatic differentiation.

Design: a ``Tensor`` wraps a numpy float array plus an optional gradient
slot. Every differentiable operation records its parents and a backward
closure on the output tensor; monotonically increasing creation ids make
the recorded graph topologically ordered by construction, so ``backward``
just walks tensors in descending id order and each node is visited once,
after all of its consumers.

Conventions
-----------
* Data is float32 or float64, flat row-major (C order) underneath.
* Broadcasting follows numpy's trailing-dimension rules; backward sums
  gradients over broadcast dimensions (``_unbroadcast``).
* Tensors are immutable after construction except for ``grad``; the
  optimizer replaces ``data`` wholesale rather than mutating in place.
* Gradients accumulate: repeated ``backward`` calls add into ``grad``
  until ``zero_grad`` (or ``grad = None``) resets them.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_ids = itertools.count()

# Module-level switch: when False, ops compute values but record no graph.
_grad_enabled = True


@contextmanager
def no_grad():
    """Context manager disabling graph recording (evaluation/benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == np.dtype(dtype):
            return self
        return _record(self.data.astype(dtype), (self,),
                       lambda g: (g.astype(self.data.dtype),))

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` for every tensor that
        requires gradients and is reachable from this scalar."""
        if self.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("backward on a tensor that requires no grad")

        # Reachable subgraph, visited in descending creation order. Parents
        # always predate children, so this is a valid reverse topological
        # order without an explicit sort key beyond the id.
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(t._parents)

        local: dict[int, np.ndarray] = {self._id: np.ones((), dtype=self.data.dtype)}
        for tid in sorted(nodes, reverse=True):
            node = nodes[tid]
            g = local.pop(tid, None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in local:
                    local[parent._id] = local[parent._id] + pg
                else:
                    local[parent._id] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- graph plumbing ----------------------------------------------------------

def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # Python scalars adopt the partner dtype so float32 graphs stay float32.
    if isinstance(x, (int, float)) and dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _record(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _record(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data),
                                           b.data.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    return _record(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_vals(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay finite for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_vals(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    a = _as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    return _record(out, (a,), lambda g: (g * _sigmoid_vals(a.data),))


def silu(a) -> Tensor:
    """x * sigmoid(x) (the SiLU / swish gate)."""
    a = _as_tensor(a)
    s = _sigmoid_vals(a.data)
    out = a.data * s
    return _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record(0.5 * x * (1.0 + t), (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,),
                   lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` else ``b``; cond is a plain bool
    array (not differentiated)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    cond = np.asarray(cond, dtype=bool)
    return _record(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.data.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.data.shape)))


# -- shape manipulation ------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape
    return _record(a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def slice_last(a, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along the last axis."""
    a = _as_tensor(a)
    out = a.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def take_tokens(a, index: np.ndarray) -> Tensor:
    """Gather along the second-to-last axis: out[..., i, :] = a[..., index[i], :]."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"take_tokens index must be 1-D, got {index.shape}")
    out = np.take(a.data, index, axis=-2)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (Ellipsis, index, slice(None)), g)
        return (full,)

    return _record(out, (a,), backward)


# -- reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _record(out, (a,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the last axis of an arbitrary-rank input.

    x: (..., K), w: (K, M), b: (M,) -> (..., M)
    """
    x = _as_tensor(x)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear: input width {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1]))
    out = matmul(flat, w)
    out = reshape(out, lead + (w.data.shape[1],))
    if b is not None:
        out = add(out, b)
    return out


# -- fused neural-net ops ----------------------------------------------------

def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def layernorm(a, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along one axis (no affine).

    A constant vector normalizes to all zeros. Affine scale/shift, when
    wanted, is applied by the caller with plain mul/add.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    out = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gym),)

    return _record(out, (a,), backward)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) over NCHW or CHW input.

    x: (B, Cin, H, W) or (Cin, H, W); w: (Cout, Cin/groups, kh, kw).
    Output spatial size: floor((S + 2*padding - k) / stride) + 1.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D x and w, got {x.data.shape} and {w.data.shape}")
    B, cin, H, W = x.data.shape
    cout, cin_g, kh, kw = w.data.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g} channels per group, input provides {cin // groups}")
    s, p = int(stride), int(padding)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")
    ho = (H + 2 * p - kh) // s + 1
    wo = (W + 2 * p - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if groups == cin == cout:
        return _depthwise_conv2d(x, w, b, xp, s, p, ho, wo, squeeze)
    cols = np.empty((B, cin, kh, kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    cols_g = cols.reshape(B, groups, cin_g * kh * kw, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(w_g[None], cols_g).reshape(B, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        g4 = g.reshape(B, groups, cout // groups, ho * wo)
        dw = np.matmul(g4, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        dw = dw.reshape(cout, cin_g, kh, kw)
        dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g4)
        dcols = dcols.reshape(B, cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    result = _record(out, parents, backward)
    if squeeze:
        result = reshape(result, result.data.shape[1:])
    return result


def _depthwise_conv2d(x, w, b, xp, s, p, ho, wo, squeeze) -> Tensor:
    """conv2d fast path for groups == Cin == Cout.

    Accumulates per-tap products instead of materializing the kh*kw
    column blowup — one channel talks only to itself, so each tap is an
    elementwise multiply of a strided input window with a (C,) weight
    slice. Same contract and gradient as the general path.
    """
    B, C, H, W = x.data.shape
    _, _, kh, kw = w.data.shape
    out = np.zeros((B, C, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w.data[None, :, 0, i, j, None, None] \
                * xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    if b is not None:
        out = out + b.data.reshape(1, C, 1, 1)

    def backward(g):
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        scratch = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                if g.dtype == dw.dtype:
                    np.einsum("bchw,bchw->c", g, window, out=dw[:, 0, i, j],
                              optimize=True)
                else:  # mixed-precision caller: accumulate wide, then cast
                    dw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, window,
                                               optimize=True)
                np.multiply(g, w.data[None, :, 0, i, j, None, None],
                            out=scratch)
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += scratch
        dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    result = _record(out, parents, backward)
    if squeeze:
        result = reshape(result, result.data.shape[1:])
    return result


def batchnorm_infer(x, mean: np.ndarray, var: np.ndarray, gamma, beta,
                    eps: float = 1e-5) -> Tensor:
    """Inference batch norm over channel axis 1 of NCHW with fixed statistics."""
    x = _as_tensor(x)
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape).astype(x.dtype)
    mu = mean.reshape(shape).astype(x.dtype)
    scaled = mul(sub(x, Tensor(mu)), Tensor(inv))
    return add(mul(scaled, reshape(gamma, shape)), reshape(beta, shape))


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean (or (C, H, W) -> (C,))."""
    x = _as_tensor(x)
    if x.data.ndim == 4:
        return tmean(x, axis=(2, 3))
    if x.data.ndim == 3:
        return tmean(x, axis=(1, 2))
    raise ShapeError(f"global_avg_pool expects 3-D or 4-D input, got {x.data.shape}")
