"""Dense tensors with tape-based reverse-mode differentiation.

Storage is float32 by default; reductions accumulate in float64.  Operations
only record onto a :class:`Tape` when one is active *and* at least one input
requires a gradient, so evaluation passes run without bookkeeping.

    with Tape() as tape:
        loss = cross_entropy(x @ w, labels)
    tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE: type = np.float32
_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def get_default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE, copy=True, ndmin=0)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == _DTYPE else arr.astype(_DTYPE)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("parents", "out", "backward")

    def __init__(self, parents, out, backward):
        self.parents = parents
        self.out = out
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, parents: Sequence[Tensor], out: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before recording")
        self._records.append(_Record(tuple(parents), out, backward))
        self._outputs.add(id(out))

    def reset(self) -> None:
        self._records.clear()
        self._outputs.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already ran on this tape; reset() it first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced through this tape")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            pgrads = rec.backward(g)
            for p, pg in zip(rec.parents, pgrads):
                if not p.requires_grad:
                    continue
                if id(p) in self._outputs:
                    if pg is None:
                        continue
                    acc = pending.get(id(p))
                    pending[id(p)] = pg if acc is None else acc + pg
                else:
                    leaves[id(p)] = p
                    if pg is None:
                        continue
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype)
                    else:
                        p.grad += pg
        for p in leaves.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


# ----------------------------------------------------------------------------
# helpers


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if data.dtype.kind == "f" and np.isnan(data).any():
        raise NumericError("NaN produced or propagated")
    needs = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        _ACTIVE[-1].record(parents, out, backward)
    return out


def _check_input(x: Tensor) -> None:
    if np.isnan(x.data).any():
        raise NumericError("NaN input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from e


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    _check_input(x)
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    _check_input(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result(out, (x,), bw)


def activation(name: str) -> Callable[[Tensor], Tensor]:
    if name == "gelu":
        return gelu
    if name == "relu":
        return relu
    raise ValueError(f"unknown activation {name!r}")


# ----------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return _result(out, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor; duplicate indices accumulate in backward."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ----------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    s = sum_(x, axis, keepdims)
    return mul(s, 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_input(x)
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p64 = e / e.sum(axis=axis, keepdims=True)
    p = p64.astype(x.data.dtype)

    def bw(g):
        dot = np.sum(g * p64, axis=axis, keepdims=True)
        return ((p64 * (g - dot)).astype(g.dtype),)

    return _result(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_input(x)
    xd = x.data.astype(np.float64)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out64 = shifted - lse
    p64 = np.exp(out64)

    def bw(g):
        return ((g - p64 * np.sum(g, axis=axis, keepdims=True, dtype=np.float64)).astype(g.dtype),)

    return _result(out64.astype(x.data.dtype), (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms."""
    _check_input(x)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]
    dtype = x.data.dtype
    parents: list[Tensor] = [x]
    out = xhat
    if gamma is not None:
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        out = out + beta.data
        parents.append(beta)

    def bw(g):
        g64 = g.astype(np.float64)
        gx = g64 * gamma.data if gamma is not None else g64
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        grads = [dx.astype(dtype)]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g64 * xhat).sum(axis=lead).astype(dtype))
        if beta is not None:
            grads.append(g64.sum(axis=lead).astype(dtype))
        return tuple(grads)

    return _result(out.astype(dtype), parents, bw)


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Mean cross-entropy of row-wise logits.

    ``target`` is either integer class ids of shape (N,) or a probability
    matrix of shape (N, K).  Optional per-row ``weights`` scale each term
    before averaging over N.
    """
    _check_input(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != n:
            raise ShapeError("target length differs from batch size")
        y = np.zeros((n, k), dtype=np.float64)
        y[np.arange(n), target.astype(np.int64)] = 1.0
    else:
        if target.shape != (n, k):
            raise ShapeError(f"soft target shape {target.shape} != logits {logits.shape}")
        y = target.astype(np.float64)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    xd = logits.data.astype(np.float64)
    shifted = xd - xd.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per = -(y * logp).sum(axis=1)
    loss = np.asarray((w * per).sum() / n)
    p = np.exp(logp)
    ysum = y.sum(axis=1, keepdims=True)

    def bw(g):
        grad = (p * ysum - y) * (w / n)[:, None] * float(g)
        return (grad.astype(logits.data.dtype),)

    return _result(loss.astype(logits.data.dtype), (logits,), bw)
