"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on an explicit :class:`Tape` (the computation record)
only while a tape is active and at least one input requires a gradient::

    with Tape() as tape:
        loss = (w * x).sum()
    backward(loss)
    w.grad

A tape supports exactly one backward pass; build a new one per step.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

NEG_INF = -np.inf


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class EmptyAxis(AutodiffError, ValueError):
    pass


class NonScalarRoot(AutodiffError):
    pass


class DoubleBackward(AutodiffError):
    pass


_local = threading.local()

# op name -> multiplier applied to every input gradient; used by gradcheck
# fault injection only.
_faults: dict[str, float] = {}


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; ``nodes[i].output.node == i``."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class Tensor:
    __slots__ = ("value", "_grad", "requires_grad", "node", "tape", "name")

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.value)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def record(op: str, value, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of ``op`` and put it on the active tape.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    Custom fused operations use this directly.
    """
    out = Tensor(value)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    if tape.consumed:
        raise DoubleBackward("tape already consumed by backward(); start a new Tape")
    if op in _faults:
        factor = _faults[op]
        inner = backward

        def backward(g, _inner=inner, _f=factor):
            return tuple(None if d is None else _f * d for d in _inner(g))

    out.requires_grad = True
    out.node = len(tape.nodes)
    out.tape = tape
    tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``root``."""
    if root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    if tape is None or root.node is None:
        raise AutodiffError("root is not on a computation record")
    if tape.consumed:
        raise DoubleBackward("backward already ran on this record")
    tape.consumed = True

    nodes = tape.nodes
    grads: list = [None] * (root.node + 1)
    grads[root.node] = np.ones_like(root.value)
    for i in range(root.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        node.output._grad = g
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            j = inp.node if inp.tape is tape else None
            if j is None:
                inp._grad = ig.copy() if inp._grad is None else inp._grad + ig
            elif grads[j] is None:
                grads[j] = ig
            else:
                grads[j] = grads[j] + ig
        grads[i] = None


@contextmanager
def inject_fault(op: str, factor: float = -1.0):
    """Scale the backward rule of ``op`` by ``factor`` (default: sign flip)."""
    _faults[op] = factor
    try:
        yield
    finally:
        _faults.pop(op, None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return record(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return record(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    if np.any(v <= 0) or np.any(np.isnan(v)):
        raise DomainError("log of non-positive value")
    return record("log", np.log(v), (a,), lambda g: (g / v,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.value)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return record("square", v * v, (a,), lambda g: (2.0 * g * v,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "exp": exp, "log": log,
    "tanh": tanh, "sigmoid": sigmoid, "square": square,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b) if kind in ("add", "sub", "mul") else fn(a)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    return record(
        "reduce_sum", a.value.sum(axis=ax, keepdims=keepdims), (a,),
        lambda g: (_expand(g, shape, ax, keepdims).copy(),),
    )


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = a.value.size if ax is None else int(np.prod([shape[i] for i in ax]))
    return record(
        "reduce_mean", a.value.mean(axis=ax, keepdims=keepdims), (a,),
        lambda g: (_expand(g, shape, ax, keepdims) / n,),
    )


def reduce_max(a, axis: int, keepdims=False) -> Tensor:
    """Max over one axis; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    ax = axis % a.ndim
    v = a.value
    idx = np.expand_dims(v.argmax(axis=ax), ax)
    out = np.take_along_axis(v, idx, axis=ax)
    shape = v.shape

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, gk, axis=ax)
        return (full,)

    return record("reduce_max", out if keepdims else out.squeeze(ax), (a,), bw)


def _lse_value(v: np.ndarray, ax: int) -> np.ndarray:
    m = v.max(axis=ax, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(v - safe).sum(axis=ax, keepdims=True)) + safe
    return np.where(m == NEG_INF, NEG_INF, out)


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; a reduction over all ``-inf`` gives ``-inf``."""
    a = as_tensor(a)
    v = a.value
    ax = axis % v.ndim
    if v.shape[ax] == 0:
        raise EmptyAxis(f"empty reduction axis {axis}")
    out = _lse_value(v, ax)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        with np.errstate(invalid="ignore"):
            w = np.exp(v - out)
        w = np.where(out == NEG_INF, 0.0, w)
        return (gk * w,)

    return record("log_sum_exp", out if keepdims else out.squeeze(ax), (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; slices that are entirely ``-inf`` map to zeros."""
    a = as_tensor(a)
    v = a.value
    ax = axis % v.ndim
    lse = _lse_value(v, ax)
    with np.errstate(invalid="ignore"):
        out = np.exp(v - lse)
    out = np.where(lse == NEG_INF, 0.0, out)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return record("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    v = a.value
    ax = axis % v.ndim
    out = v - _lse_value(v, ax)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return record("log_softmax", out, (a,), bw)


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")

    def bw(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return record("matmul", av @ bv, (a, b), bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record("getitem", a.value[idx], (a,), bw)


def gather(a, indices, axis: int = -1) -> Tensor:
    """Select entries ``indices`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return record("gather", np.take(a.value, indices, axis=ax), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return record("transpose", a.value.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    try:
        out = np.concatenate([t.value for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return record("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    ax = axis % out.ndim
    n = len(ts)
    return record(
        "stack", out, ts,
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)),
    )


def shift(a, k: int, fill: float = NEG_INF) -> Tensor:
    """Shift along the last axis by ``k`` (right if positive, left if negative).

    Vacated slots take ``fill``.
    """
    a = as_tensor(a)
    v = a.value
    n = v.shape[-1]
    out = np.full_like(v, fill)
    m = n - abs(k)
    if m > 0:
        if k >= 0:
            out[..., k:] = v[..., :m]
        else:
            out[..., :m] = v[..., -k:]

    def bw(g):
        gi = np.zeros_like(v)
        if m > 0:
            if k >= 0:
                gi[..., :m] = g[..., k:]
            else:
                gi[..., -k:] = g[..., :m]
        return (gi,)

    return record("shift", out, (a,), bw)


def unfold(a, width: int, pad: int) -> Tensor:
    """Sliding windows over rows of an ``N x d`` matrix -> ``N' x (width*d)``.

    Rows are zero-padded by ``pad`` on both ends; stride 1.
    """
    a = as_tensor(a)
    v = a.value
    n, d = v.shape
    padded = np.zeros((n + 2 * pad, d))
    padded[pad : pad + n] = v
    n_out = n + 2 * pad - width + 1
    if n_out < 1:
        raise ShapeMismatch(f"sequence of {n} rows shorter than window {width}")
    rows = np.arange(n_out)[:, None] + np.arange(width)[None, :]
    out = padded[rows].reshape(n_out, width * d)

    def bw(g):
        gp = np.zeros_like(padded)
        np.add.at(gp, rows, g.reshape(n_out, width, d))
        return (gp[pad : pad + n],)

    return record("unfold", out, (a,), bw)


def max_pool(a, size: int) -> Tensor:
    """Non-overlapping max pooling over rows; trailing rows that do not fill a window are dropped."""
    a = as_tensor(a)
    n = a.shape[0] // size
    if n < 1:
        raise ShapeMismatch(f"{a.shape[0]} rows cannot be pooled by {size}")
    trimmed = a if n * size == a.shape[0] else getitem(a, slice(0, n * size))
    grouped = reshape(trimmed, (n, size) + a.shape[1:])
    return reduce_max(grouped, axis=1)


def where_const(mask, a, fill: float) -> Tensor:
    """``a`` where ``mask`` else the constant ``fill``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    return record(
        "where_const", np.where(mask, a.value, fill), (a,),
        lambda g: (np.where(mask, g, 0.0),),
    )
