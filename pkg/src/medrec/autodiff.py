"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations executed inside a :func:`tracing` block are appended to a
:class:`Trace` tape in execution order.  Because the tape is written in
execution order it is already topologically sorted, so
:meth:`Trace.backward` replays it once, last node first.

Outside a trace every operation is a plain numpy computation, which is what
inference and finite-difference checks use.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, ShapeError

_local = threading.local()


def _active_trace() -> "Trace | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally recorded on the active trace."""

    __slots__ = ("data", "requires_grad", "trace_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.trace_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.trace_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation("item() requires a tensor with exactly one element")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_reduce(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


class Gradients:
    """Gradient map produced by :meth:`Trace.backward`.

    Lookup of a tensor that did not participate in the loss returns zeros.
    """

    def __init__(self, entries: dict[int, tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._entries.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros_like(tensor.data)
        return entry[1]

    def __contains__(self, tensor: Tensor) -> bool:
        entry = self._entries.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def __len__(self) -> int:
        return len(self._entries)


class Trace:
    """Tape of recorded primitive applications."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out.requires_grad = True
        out.trace_id = len(self.nodes)
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        seed = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, seed)}
        for out, inputs, vjp in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
                if t.trace_id is None:
                    leaves[key] = (t, pending[key])
        return Gradients(leaves)


@contextmanager
def tracing() -> Iterator[Trace]:
    """Record operations on a fresh thread-local trace."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    trace = Trace()
    stack.append(trace)
    try:
        yield trace
    finally:
        stack.pop()


def backward(loss: Tensor, trace: Trace | None = None) -> Gradients:
    trace = trace if trace is not None else _active_trace()
    if trace is None:
        raise ContractViolation("backward called with no trace")
    return trace.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor._wrap(data)
    trace = _active_trace()
    if trace is not None:
        for t in inputs:
            if t.requires_grad:
                trace.record(out, inputs, vjp)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data + c, (a,), lambda g: (g,))


# -- nonlinearities ---------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a``; True marks a
    disallowed position, which receives an exactly-zero weight.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_broadcast(x, mask, "softmax mask")
        if np.broadcast_to(mask, x.shape).all(axis=-1).any():
            raise ContractViolation("softmax row has every position masked")
        x = np.where(mask, -np.inf, x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    xd = x.data
    if gain.shape != (xd.shape[-1],) or bias.shape != (xd.shape[-1],):
        raise ShapeError(
            f"layer_norm: feature width {xd.shape[-1]} vs gain {gain.shape}, bias {bias.shape}"
        )
    inv_n = 1.0 / xd.shape[-1]
    centred = xd - xd.sum(axis=-1, keepdims=True) * inv_n
    inv = 1.0 / np.sqrt((centred * centred).sum(axis=-1, keepdims=True) * inv_n + eps)
    xhat = centred * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=-1, keepdims=True) * inv_n
            - xhat * ((gx_hat * xhat).sum(axis=-1, keepdims=True) * inv_n)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + bias.data, (x, gain, bias), vjp)


# -- linear algebra and structure -------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} are incompatible")
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _emit(ad @ bd, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for 2-D ``x`` as one recorded step."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} and weight {wd.shape} are incompatible")
    out = xd @ wd
    if bias is None:
        return _emit(out, (x, weight), lambda g: (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if weight.requires_grad else None,
        ))
    if bias.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs output width {wd.shape[1]}")
    return _emit(out + bias.data, (x, weight, bias), lambda g: (
        g @ wd.T if x.requires_grad else None,
        xd.T @ g if weight.requires_grad else None,
        g.sum(axis=0) if bias.requires_grad else None,
    ))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on 2-D inputs as one recorded step.

    The feature axis is split into ``heads`` contiguous blocks of width
    ``d_k``; each block computes ``softmax(q k^T / sqrt(d_k)) v`` and the
    results are concatenated back.  ``mask`` (``n_q x n_k``, True =
    disallowed) applies to every head.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 2 or kd.ndim != 2 or vd.ndim != 2:
        raise ShapeError("attention expects 2-D query, key and value")
    nq, d = qd.shape
    nk = kd.shape[0]
    if kd.shape[1] != d:
        raise ShapeError(f"attention: query width {d} != key width {kd.shape[1]}")
    if vd.shape[0] != nk:
        raise ShapeError(f"attention: {nk} keys but {vd.shape[0]} values")
    dv = vd.shape[1]
    if heads < 1 or d % heads or dv % heads:
        raise ShapeError(f"attention: {heads} heads do not divide widths {d}, {dv}")
    dk = d // heads
    c = 1.0 / np.sqrt(dk)
    qh = qd.reshape(nq, heads, dk).transpose(1, 0, 2)
    kh = kd.reshape(nk, heads, dk).transpose(1, 0, 2)
    vh = vd.reshape(nk, heads, dv // heads).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * c
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (nq, nk):
            raise ShapeError(f"attention: mask {mask.shape} vs logits {(nq, nk)}")
        if mask.all(axis=-1).any():
            raise ContractViolation("attention row has every key masked")
        logits = np.where(mask, -np.inf, logits)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights = e / e.sum(axis=-1, keepdims=True)
    out = (weights @ vh).transpose(1, 0, 2).reshape(nq, dv)

    def vjp(g):
        gh = g.reshape(nq, heads, dv // heads).transpose(1, 0, 2)
        gw = gh @ vh.transpose(0, 2, 1)
        gl = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True)) * c
        gq = (gl @ kh).transpose(1, 0, 2).reshape(nq, d) if q.requires_grad else None
        gk = (gl.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(nk, d) if k.requires_grad else None
        gv = ((weights.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(nk, dv)
              if v.requires_grad else None)
        return gq, gk, gv

    return _emit(out, (q, k, v), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[a.shape for a in arrays]} differ off axis {axis}"
        ) from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tensors, vjp)


def sum_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= n)):
        raise ContractViolation(f"row index out of range for table with {n} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), vjp)
