"""Dense tensors with reverse-mode automatic differentiation.

The op set is closed on purpose: exactly what the encoders, the composition
strategies, and the metric-learning loss need, nothing framework-shaped.
Storage is numpy (row-major); all differentiation logic lives here. fp64 is
required for gradient checking, fp32 is fine for training.

Backward pass: every tensor records its parents and a closure that scatters
its output gradient into them. ``backward()`` replays those closures over the
reachable subgraph in reverse creation order, so each op is visited exactly
once and gradients accumulate additively into shared inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_seq_counter = itertools.count()


class DimensionError(ValueError):
    """Operand shapes cannot be combined by the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = ()):
        if not isinstance(data, np.ndarray) or data.dtype not in _FLOAT_DTYPES:
            raise TypeError("Tensor wraps a float32/float64 ndarray; use tensor() to build one")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward: Optional[Callable[[], None]] = None
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.data.shape}")
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for parent in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
        self._accumulate(np.ones_like(self.data))
        for node in sorted(nodes, key=lambda n: n._seq, reverse=True):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), _const(-1.0, self.dtype)))

    def __neg__(self):
        return mul(self, _const(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor; the checkpoint unit."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _const(value, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(np.asarray(data), requires_grad=requires, parents=tuple(parents))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}") from exc
    out = _make(data, (a, b))
    if out.requires_grad:
        def backward():
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
            b._accumulate(_unbroadcast(out.grad, b.data.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}") from exc
    out = _make(data, (a, b))
    if out.requires_grad:
        def backward():
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * (a.data > 0))
        out._backward = backward
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = _make(s, (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * s * (1.0 - s))
        out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = _make(t, (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * (1.0 - t * t))
        out._backward = backward
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) so neither branch overflows."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = _make(out_data, (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad * _stable_sigmoid(x))
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra / structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad @ b.data.T)
            b._accumulate(a.data.T @ out.grad)
        out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need rank 2, got {a.data.shape}")
    out = _make(a.data.T.copy(), (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad.T)
        out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = _make(a.data.reshape(shape).copy(), (a,))
    if out.requires_grad:
        def backward():
            a._accumulate(out.grad.reshape(a.data.shape))
        out._backward = backward
    return out


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis."""
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(f"concat: {a.data.shape} ++ {b.data.shape}")
    out = _make(np.concatenate([a.data, b.data], axis=-1), (a, b))
    if out.requires_grad:
        split = a.data.shape[-1]
        def backward():
            a._accumulate(out.grad[..., :split])
            b._accumulate(out.grad[..., split:])
        out._backward = backward
    return out


def broadcast_text(t: Tensor, target_spatial: tuple) -> Tensor:
    """Copy a [d] (or [N,d]) vector to every cell of an H x W grid."""
    h, w = target_spatial
    if h < 1 or w < 1:
        raise DimensionError(f"broadcast_text: bad spatial extent {target_spatial}")
    if t.data.ndim == 1:
        data = np.broadcast_to(t.data, (h, w, t.data.shape[0])).copy()
        spatial_axes = (0, 1)
    elif t.data.ndim == 2:
        n, d = t.data.shape
        data = np.broadcast_to(t.data[:, None, None, :], (n, h, w, d)).copy()
        spatial_axes = (1, 2)
    else:
        raise DimensionError(f"broadcast_text: need rank 1 or 2, got {t.data.shape}")
    out = _make(data, (t,))
    if out.requires_grad:
        def backward():
            t._accumulate(out.grad.sum(axis=spatial_axes))
        out._backward = backward
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation (no kernel flip), zero padding, optional stride.

    Input is [H,W,Cin] or batched [N,H,W,Cin]; kernel is [3,3,Cin,Cout]. The
    whole window extraction collapses to one matmul so batched training stays
    inside BLAS.
    """
    if kernel.data.ndim != 4 or kernel.data.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3xCinxCout, got {kernel.data.shape}")
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input rank must be 3 or 4, got {x.data.shape}")
    cin, cout = kernel.data.shape[2], kernel.data.shape[3]
    if x.data.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.data.shape[-1]} vs kernel {cin}")
    x4 = x.data[None] if single else x.data
    n, h, w, _ = x4.shape
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (w + 2 * pad - 3) // stride + 1
    xp = np.pad(x4, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, 3, 3, cin),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3))
    cols = view.reshape(n * ho * wo, 9 * cin)
    kflat = kernel.data.reshape(9 * cin, cout)
    flat = cols @ kflat
    if bias is not None:
        if bias.data.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.data.shape} vs Cout {cout}")
        flat = flat + bias.data
    data = flat.reshape(n, ho, wo, cout)
    if single:
        data = data[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(data, parents)
    if out.requires_grad:
        def backward():
            g = out.grad.reshape(n * ho * wo, cout)
            kernel._accumulate((cols.T @ g).reshape(kernel.data.shape))
            if bias is not None:
                bias._accumulate(g.sum(axis=0))
            if x.requires_grad:
                dcols = (g @ kflat.T).reshape(n, ho, wo, 3, 3, cin)
                dxp = np.zeros_like(xp)
                for di in range(3):
                    for dj in range(3):
                        dxp[:, di:di + stride * ho:stride,
                            dj:dj + stride * wo:stride, :] += dcols[:, :, :, di, dj, :]
                dx = dxp[:, pad:pad + h, pad:pad + w, :]
                x._accumulate(dx[0] if single else dx)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _check_nonempty(a: Tensor, op: str) -> None:
    if a.data.size == 0:
        raise ValueError(f"{op}: empty tensor")


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_nonempty(a, "sum")
    out = _make(np.asarray(a.data.sum(axis=axis)), (a,))
    if out.requires_grad:
        def backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        out._backward = backward
    return out


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_nonempty(a, "mean")
    count = a.data.size if axis is None else a.data.shape[axis]
    out = _make(np.asarray(a.data.mean(axis=axis)), (a,))
    if out.requires_grad:
        def backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape) / count)
        out._backward = backward
    return out


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor (scalar output)."""
    _check_nonempty(a, "l2_norm")
    norm = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))
    out = _make(np.asarray(norm, dtype=a.data.dtype), (a,))
    if out.requires_grad:
        def backward():
            if norm > 0.0:
                a._accumulate(out.grad * (a.data / norm))
        out._backward = backward
    return out


def avg_pool_spatial(a: Tensor) -> Tensor:
    """[H,W,C] -> [C] or [N,H,W,C] -> [N,C] by spatial mean."""
    _check_nonempty(a, "avg_pool_spatial")
    if a.data.ndim == 3:
        axes = (0, 1)
    elif a.data.ndim == 4:
        axes = (1, 2)
    else:
        raise DimensionError(f"avg_pool_spatial: need rank 3 or 4, got {a.data.shape}")
    h, w = a.data.shape[axes[0]], a.data.shape[axes[1]]
    out = _make(a.data.mean(axis=axes), (a,))
    if out.requires_grad:
        def backward():
            g = np.expand_dims(np.expand_dims(out.grad, axes[0]), axes[1])
            a._accumulate(np.broadcast_to(g, a.data.shape) / (h * w))
        out._backward = backward
    return out


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[r, ...] = a[r, index[r, ...]] for a rank-2 tensor; index is constant."""
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows: need rank 2, got {a.data.shape}")
    index = np.asarray(index)
    if index.shape[0] != a.data.shape[0]:
        raise DimensionError(f"gather_rows: index rows {index.shape[0]} vs tensor rows {a.data.shape[0]}")
    rows = np.broadcast_to(
        np.arange(a.data.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1)), index.shape)
    out = _make(a.data[rows, index], (a,))
    if out.requires_grad:
        def backward():
            da = np.zeros_like(a.data)
            np.add.at(da, (rows, index), out.grad)
            a._accumulate(da)
        out._backward = backward
    return out


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp)) over the last axis, max-subtracted for stability."""
    _check_nonempty(a, "logsumexp")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=-1)
    out = _make(m[..., 0] + np.log(total), (a,))
    if out.requires_grad:
        softmax = shifted / total[..., None]
        def backward():
            a._accumulate(out.grad[..., None] * softmax)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# optimization and verification
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """p <- p - lr * grad in place, then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"sgd_step: parameter {p.name!r} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    Relative error per element is |a - n| / max(1, |a|, |n|). Inputs must be
    fp64; f must be a pure scalar-valued function of them.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires fp64 inputs")
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.data.shape}")
    for t in inputs:
        t.grad = None
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*inputs).data)
            flat[j] = orig - h
            fm = float(f(*inputs).data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = aflat[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
