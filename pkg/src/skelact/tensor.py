"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by contiguous row-major numpy buffers. Math ops record
nodes on the active :class:`GradTape`; ``backward`` replays the tape in
reverse append order exactly once. float64 is the reference dtype used by
the oracles, float32 is the training dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite math was required."""


class StateError(RuntimeError):
    """Tape used in an invalid order (e.g. backward called twice)."""


_DTYPES = (np.float32, np.float64)

# Stack of currently recording tapes; ops append to the innermost one.
_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Append-only record of differentiable ops for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, out: "Tensor", parents: tuple["Tensor", ...],
                grad_fn: Callable) -> None:
        self._nodes.append((out, parents, grad_fn))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of ``loss`` into ``.grad`` of reachable tensors."""
        if self._consumed:
            raise StateError("backward already ran on this tape; build a new tape")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, grad_fn in reversed(self._nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for parent, g in zip(parents, grad_fn(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            if out.requires_grad and out._leaf:
                # loss fed straight from a leaf
                out._accumulate(g_out)
        for out, parents, _ in self._nodes:
            for parent in parents:
                if parent._leaf and parent.requires_grad and id(parent) in grads:
                    parent._accumulate(grads.pop(id(parent)))


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-d array with optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, dtype=None, requires_grad: bool = False,
                 name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(
                f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    tape = _active_tape()
    if out.requires_grad and tape is not None:
        out._leaf = False
        tape._record(out, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g / (2.0 * y),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(y.astype(x.dtype), (a,), grad_fn)


# -- shape ops -----------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = np.argsort(perm)
    return _make(np.ascontiguousarray(a.data.transpose(perm)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), grad_fn)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not sum to {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(a, axis, start, s))
        start += s
    return out


def take(a: Tensor, indices, axis: int) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.ascontiguousarray(np.take(a.data, indices, axis=axis)),
                 (a,), grad_fn)


# -- reductions ----------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- composite numeric ops ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shapes do not conform: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _make(a.data @ b.data, (a, b), grad_fn)


def softmax_lastdim(a: Tensor) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), grad_fn)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def grad_fn(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match channel count {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return (dx.astype(x.dtype),
                (g * xhat).sum(axis=lead),
                g.sum(axis=lead))

    return _make(y.astype(x.dtype), (x, gamma, beta), grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all leading axes of x (..., C).

    Running statistics are updated in place in train mode and used verbatim
    in eval mode.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batch_norm affine shapes do not match channels")
    lead = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=lead)
        var = x.data.var(axis=lead)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data
    n = int(np.prod([x.shape[ax] for ax in lead])) if lead else 1

    def grad_fn(g):
        dxhat = g * gamma.data
        if training:
            m1 = dxhat.mean(axis=lead)
            m2 = (dxhat * xhat).mean(axis=lead)
            dx = inv * (dxhat - m1 - xhat * m2)
        else:
            dx = inv * dxhat
        return (dx.astype(x.dtype),
                (g * xhat).sum(axis=lead),
                g.sum(axis=lead))

    _ = n
    return _make(y.astype(x.dtype), (x, gamma, beta), grad_fn)


def conv1d_grouped(x: Tensor, w: Tensor, bias: Tensor | None = None,
                   stride: int = 1, pad: int = 0) -> Tensor:
    """Grouped temporal convolution of x (..., T, V, C) along the T axis.

    ``w`` has shape (groups, k, C_in/groups, C_out/groups); zero padding of
    ``pad`` frames is applied on both ends.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv1d_grouped expects (B,T,V,C), got {x.shape}")
    b_, t_, v_, c_in = xd.shape
    groups, k, cig, cog = w.shape
    if groups * cig != c_in:
        raise DimensionError(
            f"conv weight {w.shape} does not match input channels {c_in}")
    if k > t_ + 2 * pad:
        raise DimensionError(
            f"kernel {k} longer than padded sequence {t_ + 2 * pad}")
    t_out = (t_ + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    xg = xp.reshape(b_, t_ + 2 * pad, v_, groups, cig)
    out = np.zeros((b_, t_out, v_, groups, cog), dtype=xd.dtype)
    for j in range(k):
        sl = xg[:, j:j + stride * t_out:stride]
        out += np.einsum("btvgi,gio->btvgo", sl, w.data[:, j])
    out = out.reshape(b_, t_out, v_, groups * cog)
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        if squeeze and g.ndim == 3:
            g = g[None]
        gg = g.reshape(b_, t_out, v_, groups, cog)
        dxp = np.zeros_like(xg)
        dw = np.zeros_like(w.data)
        for j in range(k):
            sl = xg[:, j:j + stride * t_out:stride]
            dw[:, j] = np.einsum("btvgi,btvgo->gio", sl, gg)
            dxp[:, j:j + stride * t_out:stride] += np.einsum(
                "btvgo,gio->btvgi", gg, w.data[:, j])
        dx = dxp.reshape(b_, t_ + 2 * pad, v_, c_in)
        dx = dx[:, pad:pad + t_, :, :] if pad else dx
        if squeeze:
            dx = dx[0]
        db = None if bias is None else g.sum(axis=tuple(range(g.ndim - 1)))
        return (np.ascontiguousarray(dx), dw, db)

    parents = (x, w) if bias is None else (x, w, bias)
    if bias is None:
        fn = lambda g: grad_fn(g)[:2]
    else:
        fn = grad_fn
    out_t = _make(out[0] if squeeze else out, parents, fn)
    return out_t


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def backward(loss: Tensor) -> None:
    """Run the active tape's backward pass from ``loss``."""
    tape = _active_tape()
    if tape is None:
        raise StateError("backward requires an active GradTape")
    tape.backward(loss)
