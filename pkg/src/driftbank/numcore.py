"""Dense float64 tensors and a small reverse-mode gradient tape.

Every op accepts arbitrary leading batch dimensions. Operations record a
vector-Jacobian rule on the active :class:`GradTape` only when at least one
input is tracked on that tape; otherwise they are plain numpy calls.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition was violated."""


_CHECKED = os.environ.get("DRIFTBANK_CHECKED", "1") != "0"


def set_checked(flag: bool) -> None:
    """Toggle finiteness checks on tensor construction."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


class Tensor:
    """Immutable float64 array, optionally bound to a node on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "GradTape | None" = None, node: int | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.view()  # freeze a view, never the caller's array
        if _CHECKED and not np.isfinite(arr).all():
            raise FloatingPointError("non-finite value in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class GradTape:
    """Append-only record of primitive applications.

    Use as a context manager; inside the block ops with tracked inputs are
    recorded here. A tape is meant for a single forward/backward pass.
    """

    def __init__(self):
        self.records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self.leaves: dict[str, int] = {}
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._n = 0
        self._prev = None

    def _new_node(self) -> int:
        self._n += 1
        return self._n - 1

    def watch(self, x, name: str | None = None) -> Tensor:
        """Start tracking ``x`` as a leaf; returns the tracked tensor."""
        data = x.data if isinstance(x, Tensor) else x
        t = Tensor(data, self, self._new_node())
        self._shapes[t.node] = t.shape
        if name is not None:
            if name in self.leaves:
                raise ContractError(f"leaf {name!r} already watched")
            self.leaves[name] = t.node
        return t

    def record(self, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
        ids = tuple(x.node if (x.tape is self) else None for x in inputs)
        t = Tensor(out, self, self._new_node())
        self.records.append((t.node, ids, vjp))
        return t

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False


_state = threading.local()


def active_tape() -> GradTape | None:
    return getattr(_state, "tape", None)


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients of named leaves.

    Leaves that do not influence the loss map to zero arrays.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for out_id, in_ids, vjp in reversed(tape.records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        contribs = vjp(g)
        for i, gi in zip(in_ids, contribs):
            if i is None or gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for name, node in tape.leaves.items():
        g = grads.get(node)
        out[name] = np.zeros(tape._shapes[node]) if g is None else np.asarray(g)
    return out


# ----------------------------------------------------------------- helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(inputs: Sequence[Tensor]) -> GradTape | None:
    tape = active_tape()
    if tape is None:
        return None
    for x in inputs:
        if x.tape is tape:
            return tape
    return None


def _emit(inputs, out, vjp) -> Tensor:
    tape = _tracked(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from err


# ------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _emit((a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _emit((a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _emit((a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit((a,), a.data * c, lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit((a,), ad * ad, lambda g: (2.0 * ad * g,))


def sq_distance(a, b, axis: int = -1) -> Tensor:
    """Mean over ``axis`` of ``|a - b|**2`` (broadcasting)."""
    return mean(square(sub(a, b)), axis=axis)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    One-dimensional operands are promoted the way numpy does.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-D operands")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if k_a != k_b:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad = a.data if a.ndim > 1 else a.data[None, :]
    bd = b.data if b.ndim > 1 else b.data[:, None]
    out = ad @ bd
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]
    sa, sb = a.shape, b.shape

    def vjp(g):
        g2 = g
        if a.ndim == 1 and b.ndim == 1:
            g2 = np.reshape(g, (1, 1))
        elif a.ndim == 1:
            g2 = g[..., None, :]
        elif b.ndim == 1:
            g2 = g[..., None]
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g2
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _emit((a, b), out, vjp)


def _sigmoid_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def sigmoid(x) -> Tensor:
    """Logistic function; the exponent is clamped so large |x| cannot overflow."""
    x = as_tensor(x)
    xd = np.clip(x.data, -500.0, 500.0)
    pos = xd >= 0
    y = np.empty_like(xd)
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit((x,), y, lambda g: (_sigmoid_grad(y, g),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit((x,), y, vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.data.size
        return _emit((x,), np.asarray(x.data.mean()),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))
    ax = axis % x.ndim
    n = shape[ax]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return _emit((x,), x.data.mean(axis=ax),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit((x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_pool_tokens(z) -> Tensor:
    """Average over the token axis: (..., L, D) -> (..., D)."""
    z = as_tensor(z)
    if z.ndim < 2:
        raise DimensionError("expected (..., L, D)")
    return mean(z, axis=-2)


def mean_pool_features(x) -> Tensor:
    """Average over the feature axis: (..., R, D) -> (..., R)."""
    x = as_tensor(x)
    if x.ndim < 1:
        raise DimensionError("expected (..., D)")
    return mean(x, axis=-1)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(str(err)) from err
    return _emit((x,), out, lambda g: (g.reshape(src),))


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _emit((x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _emit((x,), np.expand_dims(x.data, axis), lambda g: (g.reshape(src),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit((x,), x.data[idx], vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise DimensionError(str(err)) from err
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _emit(xs, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("stack of nothing")
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise DimensionError(str(err)) from err
    n = len(xs)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(xs, out, vjp)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
