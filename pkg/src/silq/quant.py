"""Symmetric fake quantization with straight-through and LSQ gradients.

Forward: ``x_hat = round(clip(x / s, b_l, b_u)) * s`` with round-half-to-even.
Backward: the data gradient passes through wherever ``x / s`` lies inside
``[b_l, b_u]``; the step-size gradient follows the learned-step-size rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Value, _node

STEP_FLOOR = 1e-8


class Role(str, enum.Enum):
    ACTIVATION = "activation"
    WEIGHT = "weight"
    CACHE = "cache"


class Granularity(str, enum.Enum):
    PER_TENSOR = "per-tensor"
    PER_CHANNEL = "per-channel"
    PER_TOKEN = "per-token"


class Timing(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class QuantSpecError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    role: Role = Role.ACTIVATION
    granularity: Granularity = Granularity.PER_TENSOR
    timing: Timing = Timing.STATIC
    axis: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "timing", Timing(self.timing))
        if self.bits not in (2, 4, 8, 16):
            raise QuantSpecError(f"unsupported bit width {self.bits}")
        if self.granularity is Granularity.PER_CHANNEL and self.role is not Role.WEIGHT:
            raise QuantSpecError("per-channel granularity is only for weights")
        if self.granularity is Granularity.PER_TOKEN and (
                self.role is Role.WEIGHT or self.timing is not Timing.DYNAMIC):
            raise QuantSpecError("per-token granularity needs a dynamic activation or cache site")
        if self.role is Role.WEIGHT and self.timing is Timing.DYNAMIC:
            raise QuantSpecError("weights cannot be dynamically quantized")

    @property
    def lower(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def upper(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def dynamic(self) -> bool:
        return self.timing is Timing.DYNAMIC

    def to_dict(self) -> dict:
        return {"bits": self.bits, "role": self.role.value, "granularity": self.granularity.value,
                "timing": self.timing.value, "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerSpec":
        return cls(**d)


def weight_spec(bits: int) -> QuantizerSpec:
    return QuantizerSpec(bits, Role.WEIGHT, Granularity.PER_CHANNEL, Timing.STATIC, axis=0)


def act_spec(bits: int, dynamic: bool = False, role: Role = Role.ACTIVATION) -> QuantizerSpec:
    if dynamic:
        return QuantizerSpec(bits, role, Granularity.PER_TOKEN, Timing.DYNAMIC)
    return QuantizerSpec(bits, role, Granularity.PER_TENSOR, Timing.STATIC)


@dataclass
class StepSize:
    """Positive step size(s) for one quantizer, stored as a trainable Value."""

    param: Value
    learnable: bool = True
    lr_multiplier: float = 1.0

    def __post_init__(self):
        if not np.all(self.param.data > 0):
            raise ValueError("step sizes must be positive")
        if self.lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        self.param.requires_grad = self.learnable

    @classmethod
    def of(cls, values, learnable: bool = True, lr_multiplier: float = 1.0) -> "StepSize":
        return cls(Value(values, requires_grad=learnable), learnable, lr_multiplier)

    @property
    def values(self) -> np.ndarray:
        return self.param.data

    def clamp_(self, floor: float = STEP_FLOOR) -> None:
        np.maximum(self.param.data, floor, out=self.param.data)


def _raw(s) -> np.ndarray:
    if isinstance(s, StepSize):
        return s.values
    if isinstance(s, Value):
        return s.data
    return np.asarray(s)


def scale_view(x: np.ndarray, s, spec: QuantizerSpec) -> np.ndarray:
    """Reshape step sizes so they broadcast against ``x`` for the spec's granularity."""
    s = _raw(s).astype(x.dtype, copy=False)
    g = spec.granularity
    if g is Granularity.PER_TENSOR:
        if s.size != 1:
            raise ValueError(f"per-tensor quantizer needs one step size, got {s.size}")
        return s.reshape(())
    if g is Granularity.PER_CHANNEL:
        axis = spec.axis % x.ndim
        n = x.shape[axis]
        if s.size != n:
            raise ValueError(f"per-channel quantizer needs {n} step sizes, got {s.size}")
        shape = [1] * x.ndim
        shape[axis] = n
        return s.reshape(shape)
    want = x.shape[:-1] + (1,)
    if s.size != math.prod(want):
        raise ValueError(f"per-token quantizer needs {math.prod(want)} step sizes, got {s.size}")
    return s.reshape(want)


def _check_positive(s: np.ndarray) -> None:
    if not np.all(s > 0):
        raise ValueError("step size must be positive")


def quantize_int(x: np.ndarray, s, spec: QuantizerSpec) -> np.ndarray:
    """Integer codes ``round(clip(x/s))`` as floats of x's dtype."""
    x = np.asarray(x)
    sv = scale_view(x, s, spec)
    _check_positive(sv)
    return np.round(np.clip(x / sv, spec.lower, spec.upper))


def quantize_fake(x: np.ndarray, s, spec: QuantizerSpec) -> np.ndarray:
    x = np.asarray(x)
    sv = scale_view(x, s, spec)
    _check_positive(sv)
    return np.round(np.clip(x / sv, spec.lower, spec.upper)) * sv


def backward_ste(x: np.ndarray, s, spec: QuantizerSpec, g_out: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    v = x / scale_view(x, s, spec)
    return np.where((v >= spec.lower) & (v <= spec.upper), g_out, 0).astype(np.result_type(g_out))


def _reduce_groups(t: np.ndarray, x_shape, spec: QuantizerSpec) -> np.ndarray:
    if spec.granularity is Granularity.PER_TENSOR:
        return np.asarray(t.sum())
    if spec.granularity is Granularity.PER_CHANNEL:
        axis = spec.axis % len(x_shape)
        others = tuple(i for i in range(len(x_shape)) if i != axis)
        return t.sum(axis=others)
    return t.sum(axis=-1)


def group_size(x_shape, spec: QuantizerSpec) -> int:
    if spec.granularity is Granularity.PER_TENSOR:
        return math.prod(x_shape)
    if spec.granularity is Granularity.PER_CHANNEL:
        return math.prod(x_shape) // x_shape[spec.axis % len(x_shape)]
    return x_shape[-1]


def backward_lsq_step(x: np.ndarray, s, spec: QuantizerSpec, g_out: np.ndarray,
                      grad_scale: bool = True) -> np.ndarray:
    """Gradient of the fake-quantized output w.r.t. the step size(s).

    Returns an array shaped like the stored step sizes.
    """
    x = np.asarray(x)
    s_raw = _raw(s)
    v = x / scale_view(x, s, spec)
    contrib = np.where(v < spec.lower, spec.lower,
                       np.where(v > spec.upper, spec.upper, np.round(v) - v))
    gs = _reduce_groups(contrib * g_out, x.shape, spec)
    if grad_scale:
        gs = gs / math.sqrt(group_size(x.shape, spec) * spec.upper)
    return np.asarray(gs, dtype=s_raw.dtype).reshape(s_raw.shape)


def compute_dynamic_scale(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Max-abs step size per token (last axis) or per tensor, floored at 1e-8."""
    if spec.role is Role.WEIGHT:
        raise QuantSpecError("dynamic scales are for activations and cache only")
    x = np.asarray(x)
    if spec.granularity is Granularity.PER_TOKEN:
        m = np.abs(x).max(axis=-1)
    else:
        m = np.asarray(np.abs(x).max())
    s = m / x.dtype.type(spec.upper)
    return np.where(m > 0, s, x.dtype.type(STEP_FLOOR)).astype(x.dtype)


def fake_quant(x: Value, step: StepSize | None, spec: QuantizerSpec,
               grad_scale: bool = True) -> Value:
    """Differentiable fake quantization node.

    Static sites need ``step``; its parameter receives the LSQ gradient when
    learnable. Dynamic sites derive the step from the data and treat it as a
    constant in the backward pass.
    """
    if spec.dynamic:
        s = compute_dynamic_scale(x.data, spec)
        out = quantize_fake(x.data, s, spec).astype(x.data.dtype)

        def backward(g):
            return (backward_ste(x.data, s, spec, g),)

        return _node(out, (x,), "fake_quant", backward)

    if step is None:
        raise ValueError("static quantizer needs a step size")
    sp = step.param
    out = quantize_fake(x.data, sp.data, spec).astype(x.data.dtype)

    def backward(g):
        gx = backward_ste(x.data, sp.data, spec, g) if x.requires_grad else None
        gs = backward_lsq_step(x.data, sp.data, spec, g, grad_scale) if sp.requires_grad else None
        return gx, gs

    return _node(out, (x, sp), "fake_quant", backward)


# ---------------------------------------------------------------------------
# int4 packing
# ---------------------------------------------------------------------------

def pack_int4(q) -> bytes:
    """Two signed nibbles per byte, low nibble first; odd lengths pad with 0."""
    q = np.asarray(q).reshape(-1)
    if q.size and (q.min() < -8 or q.max() > 7):
        raise ValueError("int4 values must lie in [-8, 7]")
    nib = (q.astype(np.int64) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if count > 2 * b.size:
        raise ValueError(f"{len(data)} bytes hold at most {2 * b.size} int4 values")
    nib = np.empty(2 * b.size, dtype=np.int8)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = np.where(nib > 7, nib - 16, nib).astype(np.int8)
    return nib[:count]


# ---------------------------------------------------------------------------
# stateful site wrapper used by the model
# ---------------------------------------------------------------------------

@dataclass
class Quantizer:
    """One quantization site: spec, step size, usage counter and calibration tap."""

    name: str
    spec: QuantizerSpec
    step: StepSize | None = None
    grad_scale: bool = True
    enabled: bool = True
    calls: int = 0
    observing: bool = False
    observed: list = field(default_factory=list)

    def __call__(self, x: Value) -> Value:
        self.calls += 1
        if self.observing:
            self.observed.append(np.abs(x.data).reshape(-1).copy())
            return x
        if not self.enabled:
            return x
        return fake_quant(x, self.step, self.spec, self.grad_scale)

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        """Forward-only quantization of a raw array."""
        self.calls += 1
        if not self.enabled:
            return x
        s = compute_dynamic_scale(x, self.spec) if self.spec.dynamic else self.step.values
        return quantize_fake(x, s, self.spec).astype(x.dtype)
