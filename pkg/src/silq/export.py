"""Integer export of a fake-quantized model and the matching integer-dequant loader."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .model import (WEIGHT_SITE, ModelConfig, PrecisionPlan, QuantizedModel, build_quantized_model,
                    linear_weight_names, weight_shapes)
from .quant import Role, quantize_int
from .tensor import default_dtype


class ExportParityError(RuntimeError):
    pass


def model_meta(model: QuantizedModel, **extra) -> dict:
    return {"model": model.config.to_dict(), "plan": model.plan.to_dict(), **extra}


def model_checkpoint(model: QuantizedModel, **meta) -> ckpt.Checkpoint:
    return ckpt.Checkpoint(ckpt.f32(model.state_arrays()), model_meta(model, kind="model", **meta))


def load_model(path, plan=None, act_lr_multiplier: float = 50.0) -> QuantizedModel:
    """Rebuild a model from a model checkpoint (weights plus any stored step sizes)."""
    c = ckpt.load(path)
    if c.meta.get("kind") not in ("model", None):
        raise ckpt.CheckpointError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**c.meta["model"])
    plan = PrecisionPlan.parse(plan if plan is not None else c.meta.get("plan"))
    arrays = c.arrays()
    model = build_quantized_model(cfg, plan, arrays, act_lr_multiplier=act_lr_multiplier)
    for name, st in model.step_sizes():
        key = "step." + name
        if key in arrays:
            st.param.data[...] = arrays[key]
    return model


def export_checkpoint(model: QuantizedModel, **meta) -> ckpt.Checkpoint:
    """Integer codes for every quantized linear weight plus their f32 row scales."""
    tensors: dict[str, ckpt.TensorEntry] = {}
    qnames = set()
    for name in linear_weight_names(model.config):
        q = model.quantizers.get(name)
        w = model.params[name].data.astype(np.float32)
        if q is None:
            tensors[name] = ckpt.TensorEntry("f32", w)
            continue
        if q.spec.bits > 8:
            raise ValueError(f"cannot export {q.spec.bits}-bit weights for {name}")
        s = q.step.values.astype(np.float32)
        codes = quantize_int(w, s, q.spec).astype(np.int8)
        tensors[name] = ckpt.TensorEntry("i4-packed" if q.spec.bits <= 4 else "i8", codes, name + ".scale")
        tensors[name + ".scale"] = ckpt.TensorEntry("f32", s.reshape(-1))
        qnames.add(name)
    for name, v in model.params.items():
        if name not in tensors:
            tensors[name] = ckpt.TensorEntry("f32", v.data.astype(np.float32))
    for name, st in model.step_sizes():
        if model.quantizers[name].spec.role is not Role.WEIGHT:
            tensors["step." + name] = ckpt.TensorEntry("f32", st.values.astype(np.float32))
    return ckpt.Checkpoint(tensors, model_meta(model, kind="export", **meta))


def load_exported(path) -> QuantizedModel:
    """Model whose weights are the dequantized integer codes; weight quantizers are bypassed."""
    c = ckpt.load(path)
    if c.meta.get("kind") != "export":
        raise ckpt.CheckpointError(f"{path} is not an export artifact")
    cfg = ModelConfig(**c.meta["model"])
    plan = PrecisionPlan.parse(c.meta["plan"])
    deq = c.dequantized()
    model = build_quantized_model(cfg, plan, {n: deq[n] for n in weight_shapes(cfg)})
    for name, q in model.quantizers.items():
        if q.spec.role is Role.WEIGHT:
            q.enabled = False
        elif q.step is not None:
            q.step.param.data[...] = deq["step." + name]
    return model


def parity(model: QuantizedModel, exported: QuantizedModel, prompts) -> float:
    """Largest absolute logit difference between fake-quant and integer-dequant forwards."""
    worst = 0.0
    with default_dtype(np.float32):
        for p in prompts:
            a = model.forward(p).data
            b = exported.forward(p).data
            worst = max(worst, float(np.abs(a - b).max()))
    return worst


def random_prompts(cfg: ModelConfig, n: int = 16, seed: int = 0, max_len: int | None = None) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    top = min(cfg.max_seq_len, max_len or cfg.max_seq_len)
    return [rng.integers(0, cfg.vocab_size, int(rng.integers(1, top + 1))) for _ in range(n)]


def export_model(model: QuantizedModel, path, prompts=None, tol: float = 1e-5, **meta) -> float:
    """Write the integer artifact, reload it and compare logits; raises on parity failure."""
    path = Path(path)
    c = export_checkpoint(model, **meta)
    ckpt.save(path, c)
    exported = load_exported(path)
    prompts = prompts if prompts is not None else random_prompts(model.config)
    diff = parity(model, exported, prompts)
    if not diff <= tol:
        raise ExportParityError(f"export parity failed: max |logit diff| = {diff:.3g} > {tol}")
    return diff


def estimate_export_bytes(cfg: ModelConfig, plan: PrecisionPlan) -> int:
    """Payload size predicted from shapes and bit widths alone."""
    total = 0
    for name, shape in weight_shapes(cfg).items():
        n = int(np.prod(shape))
        short = name.split(".")[-1]
        site = "head_weight" if name == "head" else WEIGHT_SITE.get(short)
        spec = plan[site] if site else None
        if spec is None:
            total += 4 * n
        else:
            total += (n + 1) // 2 if spec.bits <= 4 else n
            total += 4 * shape[0]
    for site, spec in plan.sites.items():
        if spec is not None and spec.role is not Role.WEIGHT and not spec.dynamic:
            count = 1 if site == "head_input_act" else cfg.n_layers
            total += 4 * count
    return total
