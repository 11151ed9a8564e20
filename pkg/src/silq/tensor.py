"""Small dense-tensor engine with reverse-mode automatic differentiation.

Tensors are plain row-major numpy arrays. A :class:`Value` wraps one array
together with its gradient and the record of the op that produced it.
Calling :func:`backward` on a scalar loss sorts the graph into a :class:`Tape`
and sweeps it in reverse, accumulating gradients into every ``Value`` that
requires them.

Compute runs in float32 unless :func:`default_dtype` selects another float
type (the gradient checks use float64 so finite differences are meaningful).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = [np.dtype(np.float32)]


def get_default_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Value:
    """A tensor node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *,
                 parents: tuple["Value", ...] = (), op: str = "leaf",
                 backward: BackwardFn | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True) if parents == () \
            else np.asarray(data)
        self.data: np.ndarray = arr
        self.grad: np.ndarray = np.zeros_like(arr)
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.op = op
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Value) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data: np.ndarray, parents: tuple[Value, ...], op: str, backward: BackwardFn) -> Value:
    req = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=req, parents=parents, op=op,
                 backward=backward if req else None)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    return Value(x, requires_grad=False)


def _is_scalar(v: Value) -> bool:
    return v.data.ndim == 0


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def _check_binary(a: Value, b: Value, opname: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, v: Value) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype) if _is_scalar(v) and g.ndim else g


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_binary(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(out, (a, b), "add", backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(out, (a, b), "mul", backward)


def scale(a: Value, c: float) -> Value:
    """Multiply by a fixed (non-differentiable) scalar."""
    c = a.data.dtype.type(c)
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _node(out, (a,), "scale", backward)


def silu(a: Value) -> Value:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _node(out.astype(a.data.dtype), (a,), "silu", backward)


def rsqrt(a: Value) -> Value:
    out = 1.0 / np.sqrt(a.data)

    def backward(g):
        return (g * (-0.5) * out ** 3,)

    return _node(out, (a,), "rsqrt", backward)


def sum_all(a: Value) -> Value:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _node(out, (a,), "sum", backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Value, shape: Sequence[int]) -> Value:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), "reshape", backward)


def transpose(a: Value, axes: Sequence[int] | None = None) -> Value:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(out, (a,), "transpose", backward)


def take_rows(table: Value, index) -> Value:
    """Gather rows of a 2-D table (embedding lookup); gradients scatter-add back."""
    index = np.asarray(index)
    if table.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    out = table.data[index]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(out, (table,), "take_rows", backward)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Value, b: Value) -> Value:
    """Matrix product over the last two axes; leading batch axes must agree exactly."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} do not match")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2:
        raise ShapeError("matmul: batch dimensions must match or b must be 2-D")
    if a.data.ndim == b.data.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} and {b.shape[:-2]} differ")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), "matmul", backward)


def linear(x: Value, w: Value) -> Value:
    """``x @ w.T`` for a weight stored as [out_features, in_features]."""
    return matmul(x, transpose(w))


def softmax(x: Value, axis: int = -1, mask: np.ndarray | None = None) -> Value:
    """Max-stabilised softmax; positions where ``mask`` is False get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), "softmax", backward)


def rmsnorm(x: Value, gain: Value, eps: float = 1e-6) -> Value:
    """``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} does not match last dim {x.shape[-1]}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = (xhat * gain.data).astype(x.data.dtype)

    def backward(g):
        gx = gg = None
        if x.requires_grad:
            gy = g * gain.data
            gx = inv * (gy - xhat * (gy * xhat).sum(axis=-1, keepdims=True) / d)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gg

    return _node(out, (x, gain), "rmsnorm", backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_soft(logits: Value, target_probs, atol: float = 1e-6) -> Value:
    """Mean over rows of ``-sum(target * log_softmax(logits))``; no gradient into targets."""
    t = np.asarray(target_probs.data if isinstance(target_probs, Value) else target_probs,
                   dtype=logits.data.dtype)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs targets {t.shape}")
    row_sums = t.sum(axis=-1, dtype=np.float64)
    if np.any(np.abs(row_sums - 1.0) > atol):
        raise ValueError("cross_entropy_soft: target rows must sum to 1")
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    out = np.asarray(-(t * logp).sum() / n, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        return ((p * t.sum(axis=-1, keepdims=True) - t) * (g / n),)

    return _node(out, (logits,), "cross_entropy_soft", backward)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

@dataclass
class OpRecord:
    op: str
    inputs: tuple[Value, ...]
    output: Value
    backward: BackwardFn


@dataclass
class Tape:
    """Op records in topological order (every record's inputs precede it)."""

    records: list[OpRecord]
    nodes: list[Value]

    @classmethod
    def from_output(cls, out: Value) -> "Tape":
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(out, False)]
        while stack:
            v, expanded = stack.pop()
            if expanded:
                order.append(v)
                continue
            if id(v) in seen or not v.requires_grad:
                continue
            seen.add(id(v))
            stack.append((v, True))
            for p in v.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        records = [OpRecord(v.op, v.parents, v, v._backward) for v in order if v._backward]
        return cls(records, order)


def backward(loss: Value) -> Tape:
    """Populate ``.grad`` of every Value upstream of the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are reset.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    for v in tape.nodes:
        if v.parents:
            v.grad = np.zeros_like(v.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for rec in reversed(tape.records):
        grads = rec.backward(rec.output.grad)
        for parent, g in zip(rec.inputs, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = parent.grad + np.asarray(g, dtype=parent.data.dtype)
    return tape
