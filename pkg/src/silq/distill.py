"""Knowledge-distillation QAT: loss, AdamW, learning-rate rules and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .model import QuantizedModel, next_token_loss
from .quant import STEP_FLOOR, Role
from .tensor import Value, backward, cross_entropy_soft, reshape, scale, take_rows

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 5e-6
    base_steps: int = 8000
    steps: int = 8000
    kd_ratio: float = 1.0
    kd_temp: float = 1.0
    kd_mixing: str = "convex"
    mixture_ratio: float = 0.25
    act_lr_multiplier: float = 50.0
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-10
    weight_decay: float = 0.1
    decay_step_sizes: bool = False
    batch_size: int = 128
    seq_len: int = 1024
    min_lr_fraction: float = 0.1
    dropout: float = 0.0
    grad_clip: float | None = None
    auto_lr: bool = False
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.base_lr <= 0 or self.act_lr_multiplier <= 0 or self.kd_temp <= 0:
            raise ValueError("learning rates, multipliers and temperature must be positive")
        if self.steps < 0 or self.base_steps <= 0:
            raise ValueError("step counts must be non-negative (base_steps positive)")
        if not 0.0 <= self.kd_ratio <= 1.0 or not 0.0 <= self.mixture_ratio <= 1.0:
            raise ValueError("kd_ratio and mixture_ratio must lie in [0, 1]")
        if self.kd_mixing not in ("convex", "ratio"):
            raise ValueError("kd_mixing must be 'convex' or 'ratio'")
        if self.dropout != 0:
            raise ValueError("dropout must stay disabled for distillation")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def peak_lr(self) -> float:
        if self.auto_lr:
            return scale_lr_for_steps(self.base_lr, self.base_steps, max(self.steps, 1))
        return self.base_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["peak_lr"] = self.peak_lr
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "peak_lr"}
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_weights(kd_ratio: float, mixing: str = "convex") -> tuple[float, float]:
    """(soft, hard) loss weights.

    ``convex`` treats the ratio as the weight on the distillation term;
    ``ratio`` reads it as distillation:next-token = ratio:1.
    """
    if mixing == "convex":
        return kd_ratio, 1.0 - kd_ratio
    if mixing == "ratio":
        return kd_ratio / (1.0 + kd_ratio), 1.0 / (1.0 + kd_ratio)
    raise ValueError(f"unknown kd mixing {mixing!r}")


def kd_loss(student_logits: Value, teacher_logits, targets, kd_ratio: float = 1.0,
            kd_temp: float = 1.0, mixing: str = "convex") -> Value:
    """``w_soft * T^2 * CE(softmax(teacher/T), student/T) + w_hard * CE(targets, student)``.

    The teacher logits are data only. Terms with zero weight are skipped, so a
    pure distillation loss never reads ``targets``.
    """
    if kd_temp <= 0:
        raise ValueError("kd_temp must be positive")
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Value) else teacher_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"student {student_logits.shape} and teacher {t.shape} logits differ")
    w_soft, w_hard = kd_weights(kd_ratio, mixing)
    loss = None
    if w_soft > 0:
        soft = softmax_np(t.astype(np.float64) / kd_temp).astype(student_logits.data.dtype)
        soft /= soft.sum(axis=-1, keepdims=True, dtype=np.float64).astype(soft.dtype)
        kd = cross_entropy_soft(scale(student_logits, 1.0 / kd_temp), soft, atol=1e-4)
        loss = scale(kd, w_soft * kd_temp ** 2)
    if w_hard > 0:
        targets = np.asarray(targets).reshape(-1)
        onehot = np.zeros(student_logits.shape, dtype=student_logits.data.dtype)
        onehot[np.arange(targets.size), targets] = 1
        ce = scale(cross_entropy_soft(student_logits, onehot), w_hard)
        loss = ce if loss is None else loss + ce
    return loss


# ---------------------------------------------------------------------------
# learning-rate rules
# ---------------------------------------------------------------------------

def lr_schedule(step: int, steps: int, peak: float, min_fraction: float = 0.1) -> float:
    """Cosine decay from ``peak`` to ``min_fraction * peak`` with no warm-up."""
    if not 0 <= step <= max(steps, 0):
        raise ValueError(f"step {step} outside [0, {steps}]")
    lo = min_fraction * peak
    if steps == 0:
        return peak
    return lo + 0.5 * (peak - lo) * (1.0 + math.cos(math.pi * step / steps))


def scale_lr_for_steps(base_lr: float, base_steps: int, new_steps: int) -> float:
    """Inverse-square-root learning-rate rescaling for a change in run length."""
    if base_lr <= 0 or base_steps <= 0 or new_steps <= 0:
        raise ValueError("all arguments must be positive")
    return base_lr * math.sqrt(base_steps / new_steps)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
               betas=(0.9, 0.95), eps: float = 1e-10, weight_decay: float = 0.0,
               lr_scales: list[float] | None = None, decay_mask: list[bool] | None = None) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}")
        step_lr = lr * (lr_scales[i] if lr_scales else 1.0)
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p -= p.dtype.type(step_lr * weight_decay) * p
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (step_lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Value]]
    lr_scale: float
    weight_decay: float


class AdamW:
    """AdamW over named parameter groups, each with an LR multiplier and decay."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.95), eps: float = 1e-10):
        self.groups = [g for g in groups if g.params]
        self.betas = tuple(betas)
        self.eps = eps
        flat = [v.data for g in self.groups for _, v in g.params]
        self.state = AdamState.zeros_like(flat)

    def group_lrs(self, lr: float) -> dict[str, float]:
        return {g.name: lr * g.lr_scale for g in self.groups}

    def step(self, lr: float) -> None:
        params, grads, scales, decay = [], [], [], []
        for g in self.groups:
            for _, v in g.params:
                params.append(v.data)
                grads.append(v.grad)
                scales.append(g.lr_scale)
                decay.append(g.weight_decay)
        # decay differs per group, so apply it first then run a decay-free Adam update
        for p, s, wd in zip(params, scales, decay):
            if wd:
                p -= p.dtype.type(lr * s * wd) * p
        adamw_step(params, grads, self.state, lr, self.betas, self.eps, 0.0, scales)


def param_groups(model: QuantizedModel, config: TrainConfig) -> list[ParamGroup]:
    decayed, plain, wsteps, asteps = [], [], [], []
    for name, v in model.parameters():
        if not v.requires_grad:
            continue
        (plain if name.endswith("norm") else decayed).append((name, v))
    for name, st in model.step_sizes():
        if not st.learnable:
            continue
        q = model.quantizers[name]
        (wsteps if q.spec.role is Role.WEIGHT else asteps).append((name, st.param))
    step_wd = config.weight_decay if config.decay_step_sizes else 0.0
    return [
        ParamGroup("weights", decayed, 1.0, config.weight_decay),
        ParamGroup("norms", plain, 1.0, 0.0),
        ParamGroup("weight_steps", wsteps, 1.0, step_wd),
        ParamGroup("act_steps", asteps, config.act_lr_multiplier, step_wd),
    ]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class DivergenceError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainMetrics:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    group_lrs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def log(self, step: int, loss: float, lr: float, grad_norm: float) -> dict:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("metric steps must increase")
        rec = {"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm}
        self.records.append(rec)
        return rec

    def to_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def freeze(model: QuantizedModel) -> QuantizedModel:
    for _, v in model.parameters():
        v.requires_grad = False
    for _, st in model.step_sizes():
        st.param.requires_grad = False
    return model


def _grad_norm(groups: list[ParamGroup]) -> float:
    return math.sqrt(sum(float(np.sum(v.grad.astype(np.float64) ** 2))
                         for g in groups for _, v in g.params))


def _clip(groups: list[ParamGroup], max_norm: float, norm: float) -> None:
    if norm > max_norm > 0:
        f = max_norm / (norm + 1e-12)
        for g in groups:
            for _, v in g.params:
                v.grad *= v.grad.dtype.type(f)


def _valid_rows(logits: Value, mask: np.ndarray) -> tuple[Value, np.ndarray]:
    V = logits.shape[-1]
    rows = np.flatnonzero(np.asarray(mask, bool).reshape(-1))
    return take_rows(reshape(logits, (-1, V)), rows), rows


def kd_batch_loss(student: QuantizedModel, teacher: QuantizedModel, tokens: np.ndarray,
                  mask: np.ndarray, config: TrainConfig) -> Value:
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    t_logits = teacher.forward(inp).data
    s_rows, rows = _valid_rows(student.forward(inp), mask)
    t_rows = t_logits.reshape(-1, t_logits.shape[-1])[rows]
    return kd_loss(s_rows, t_rows, tgt.reshape(-1)[rows], config.kd_ratio, config.kd_temp,
                   config.kd_mixing)


def _snapshot(model: QuantizedModel, step: int, lr: float, loss: float, grad_norm=None) -> dict:
    return {"step": step, "lr": lr, "loss": loss, "grad_norm": grad_norm,
            "param_norms": {n: float(np.linalg.norm(v.data)) for n, v in model.parameters()}}


def _run(model: QuantizedModel, loss_fn: Callable[[np.ndarray, np.ndarray], Value], sampler,
         config: TrainConfig, on_step: Callable[[dict], None] | None,
         eval_fn: Callable[[], float] | None, eval_every: int) -> TrainMetrics:
    groups = param_groups(model, config)
    opt = AdamW(groups, config.betas, config.adam_eps)
    metrics = TrainMetrics()
    peak = config.peak_lr
    t0 = time.perf_counter()
    for step in range(config.steps):
        lr = lr_schedule(step, config.steps, peak, config.min_lr_fraction)
        tokens, mask = sampler.sample(config.batch_size, config.seq_len + 1)
        model.zero_grad()
        loss = loss_fn(tokens, mask)
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise DivergenceError(f"non-finite loss at step {step}", _snapshot(model, step, lr, lval))
        backward(loss)
        gn = _grad_norm(groups)
        if not math.isfinite(gn):
            raise DivergenceError(f"non-finite gradient at step {step}",
                                  _snapshot(model, step, lr, lval, gn))
        if config.grad_clip:
            _clip(groups, config.grad_clip, gn)
        opt.step(lr)
        for _, st in model.step_sizes():
            st.clamp_(STEP_FLOOR)
        rec = metrics.log(step, lval, lr, gn)
        metrics.group_lrs.append(opt.group_lrs(lr))
        if on_step:
            on_step(rec)
        if eval_fn and eval_every and (step + 1) % eval_every == 0:
            metrics.evals.append({"step": step, "eval": eval_fn()})
    metrics.wall_clock = time.perf_counter() - t0
    return metrics


def train_qat(student: QuantizedModel, teacher: QuantizedModel, sampler, config: TrainConfig,
              on_step: Callable[[dict], None] | None = None,
              eval_fn: Callable[[], float] | None = None, eval_every: int = 0) -> TrainMetrics:
    """Distil ``teacher`` into the fake-quantized ``student`` for ``config.steps`` steps."""
    freeze(teacher)
    return _run(student, lambda tok, m: kd_batch_loss(student, teacher, tok, m, config),
                sampler, config, on_step, eval_fn, eval_every)


def train_lm(model: QuantizedModel, sampler, config: TrainConfig,
             on_step: Callable[[dict], None] | None = None) -> TrainMetrics:
    """Plain next-token training (used to produce full-precision teachers)."""
    return _run(model, lambda tok, m: next_token_loss(model, tok, m), sampler, config,
                on_step, None, 0)


def kd_eval_loss(student: QuantizedModel, teacher: QuantizedModel,
                 batches: Iterable[tuple[np.ndarray, np.ndarray]], kd_temp: float = 1.0) -> float:
    """Token-weighted distillation loss (pure KD) on held-out batches."""
    total, count = 0.0, 0
    cfg = TrainConfig(kd_ratio=1.0, kd_temp=kd_temp)
    for tokens, mask in batches:
        n = int(np.asarray(mask, bool).sum())
        if n:
            total += float(kd_batch_loss(student, teacher, tokens, mask, cfg).data) * n
            count += n
    if not count:
        raise ValueError("empty evaluation set")
    return total / count
