"""Tiny decoder-only transformer with fake-quantization sites.

Each block follows the A8-C8-W4 layout: one activation quantizer on the
normalised attention input (shared by the q/k/v projections), per-channel
weight quantizers on every projection, a 16-bit quantizer on the query, cache
quantizers on keys and values, an optional 16-bit quantizer on the attention
probabilities, quantizers on the o-projection and down-projection inputs, and
a shared quantizer on the MLP input feeding gate and up. The output head runs
at 8 bits; the embedding table is never quantized.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import calib
from .quant import (Quantizer, QuantizerSpec, Role, StepSize, act_spec,
                    compute_dynamic_scale, quantize_fake, quantize_int, weight_spec)
from .tensor import (Value, add, constant, cross_entropy_soft, get_default_dtype, linear,
                     matmul, mul, reshape, rmsnorm, scale, silu, softmax, take_rows, transpose)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 128
    rotary: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for k in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.rotary and (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary embeddings need an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# precision plan
# ---------------------------------------------------------------------------

SITE_ROLES = {
    "attn_input_act": Role.ACTIVATION,
    "qkv_weights": Role.WEIGHT,
    "query_out": Role.ACTIVATION,
    "key_cache": Role.CACHE,
    "value_cache": Role.CACHE,
    "attn_probs": Role.ACTIVATION,
    "o_input_act": Role.ACTIVATION,
    "o_weight": Role.WEIGHT,
    "mlp_input_act": Role.ACTIVATION,
    "gate_up_weights": Role.WEIGHT,
    "down_input_act": Role.ACTIVATION,
    "down_weight": Role.WEIGHT,
    "head_input_act": Role.ACTIVATION,
    "head_weight": Role.WEIGHT,
    "embedding": None,
}
SITES = tuple(SITE_ROLES)

_PRESET = re.compile(r"^A(\d+)([sd])-C(\d+)-W(\d+)$")


class PlanError(ValueError):
    pass


@dataclass
class PrecisionPlan:
    """Quantizer spec (or None for full precision) for every named site."""

    sites: dict[str, QuantizerSpec | None]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = set(self.sites)
        missing = [s for s in SITES if s not in names]
        extra = sorted(names - set(SITES))
        if missing:
            raise PlanError(f"plan is missing sites: {missing}")
        if extra:
            raise PlanError(f"plan names unknown sites: {extra}")
        for site, spec in self.sites.items():
            if spec is None:
                continue
            role = SITE_ROLES[site]
            if role is None:
                raise PlanError("the embedding site takes no quantizer")
            if spec.role is not role:
                raise PlanError(f"site {site} needs role {role.value}, got {spec.role.value}")

    def check_deployment(self) -> None:
        """Enforce the deployment bit-width rules on top of structural validity."""
        for site, spec in self.sites.items():
            if spec is None:
                if site in ("attn_probs", "embedding"):
                    continue
                raise PlanError(f"deployment plans must quantize {site}")
            if site in ("key_cache", "value_cache"):
                ok = spec.bits in (4, 8)
            elif site in ("query_out", "attn_probs"):
                ok = spec.bits == 16
            elif site == "head_weight":
                ok = spec.bits == 8
            elif spec.role is Role.WEIGHT:
                ok = spec.bits == 4
            else:
                ok = spec.bits == 8
            if not ok:
                raise PlanError(f"site {site} cannot run at {spec.bits} bits in deployment")

    def __getitem__(self, site: str) -> QuantizerSpec | None:
        return self.sites[site]

    @classmethod
    def preset(cls, name: str) -> "PrecisionPlan":
        """Parse names like ``A8s-C8-W4`` (static) or ``A8d-C4-W4`` (per-token dynamic)."""
        m = _PRESET.match(name)
        if not m:
            raise PlanError(f"unrecognised plan name {name!r}")
        a, mode, c, w = int(m[1]), m[2], int(m[3]), int(m[4])
        dyn = mode == "d"
        act = act_spec(a, dyn)
        cache = act_spec(c, dyn, Role.CACHE)
        wq = weight_spec(w)
        return cls({
            "attn_input_act": act, "qkv_weights": wq, "query_out": act_spec(16, dyn),
            "key_cache": cache, "value_cache": cache, "attn_probs": None,
            "o_input_act": act, "o_weight": wq, "mlp_input_act": act, "gate_up_weights": wq,
            "down_input_act": act, "down_weight": wq, "head_input_act": act_spec(8, dyn),
            "head_weight": weight_spec(8), "embedding": None,
        })

    @classmethod
    def full_precision(cls) -> "PrecisionPlan":
        return cls({s: None for s in SITES})

    @classmethod
    def uniform(cls, bits: int, dynamic: bool = False) -> "PrecisionPlan":
        sites: dict[str, QuantizerSpec | None] = {}
        for s, role in SITE_ROLES.items():
            if role is None or s == "attn_probs":
                sites[s] = None
            elif role is Role.WEIGHT:
                sites[s] = weight_spec(bits)
            else:
                sites[s] = act_spec(bits, dynamic, role)
        return cls(sites)

    def to_dict(self) -> dict:
        return {s: (None if v is None else v.to_dict()) for s, v in self.sites.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionPlan":
        return cls({s: (None if v is None else QuantizerSpec.from_dict(v)) for s, v in d.items()})

    @classmethod
    def parse(cls, obj) -> "PrecisionPlan":
        if isinstance(obj, PrecisionPlan):
            return obj
        if obj in (None, "fp", "full", "full-precision"):
            return cls.full_precision()
        if isinstance(obj, str):
            return cls.preset(obj)
        return cls.from_dict(obj)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

LAYER_WEIGHTS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
WEIGHT_SITE = {"wq": "qkv_weights", "wk": "qkv_weights", "wv": "qkv_weights", "wo": "o_weight",
               "w_gate": "gate_up_weights", "w_up": "gate_up_weights", "w_down": "down_weight"}
LAYER_ACTS = ("attn_input_act", "query_out", "key_cache", "value_cache", "attn_probs",
              "o_input_act", "mlp_input_act", "down_input_act")


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({p + "attn_norm": (d,), p + "wq": (d, d), p + "wk": (d, d),
                       p + "wv": (d, d), p + "wo": (d, d), p + "mlp_norm": (d,),
                       p + "w_gate": (f, d), p + "w_up": (f, d), p + "w_down": (d, f)})
    shapes["final_norm"] = (d,)
    shapes["head"] = (cfg.vocab_size, d)
    return shapes


def linear_weight_names(cfg: ModelConfig) -> list[str]:
    names = [f"layers.{i}.{w}" for i in range(cfg.n_layers) for w in LAYER_WEIGHTS]
    return names + ["head"]


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith("norm"):
            out[name] = np.ones(shape, dtype=np.float32)
        else:
            out[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _rotate_half_matrix(d: int, head_dim: int) -> np.ndarray:
    """Signed permutation P with ``x @ P == rotate_half(x)`` applied per head."""
    P = np.zeros((d, d))
    half = head_dim // 2
    for h in range(0, d, head_dim):
        for j in range(half):
            P[h + j + half, h + j] = -1.0
            P[h + j, h + j + half] = 1.0
    return P


def rope_tables(cfg: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hd = cfg.head_dim
    inv = cfg.rope_base ** (-np.arange(0, hd // 2) * 2.0 / hd)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.tile(np.cos(ang), cfg.n_heads), np.tile(np.sin(ang), cfg.n_heads)


class QuantizedModel:
    """Parameters, quantizer sites and the differentiable forward pass."""

    def __init__(self, config: ModelConfig, plan: PrecisionPlan,
                 params: dict[str, Value], quantizers: dict[str, Quantizer]):
        self.config = config
        self.plan = plan
        self.params = params
        self.quantizers = quantizers
        self._rot = _rotate_half_matrix(config.d_model, config.head_dim)

    # -- bookkeeping --------------------------------------------------------

    def parameters(self) -> list[tuple[str, Value]]:
        return list(self.params.items())

    def step_sizes(self) -> list[tuple[str, StepSize]]:
        return [(n, q.step) for n, q in self.quantizers.items() if q.step is not None]

    def weight_quantizer(self, pname: str) -> Quantizer | None:
        return self.quantizers.get(pname)

    def reset_counters(self) -> None:
        for q in self.quantizers.values():
            q.calls = 0

    def set_observing(self, flag: bool) -> None:
        for q in self.quantizers.values():
            if q.spec.role is not Role.WEIGHT:
                q.observing = flag
                if flag:
                    q.observed = []

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all weights and static step sizes."""
        out = {n: v.data for n, v in self.params.items()}
        for n, st in self.step_sizes():
            out["step." + n] = st.values
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, v in self.params.items():
            v.data[...] = arrays[n]
        for n, st in self.step_sizes():
            st.param.data[...] = arrays["step." + n]

    def zero_grad(self) -> None:
        for _, v in self.params.items():
            v.zero_grad()
        for _, st in self.step_sizes():
            st.param.zero_grad()

    # -- forward ------------------------------------------------------------

    def _q(self, name: str, x: Value) -> Value:
        q = self.quantizers.get(name)
        return x if q is None else q(x)

    def _w(self, pname: str) -> Value:
        return self._q(pname, self.params[pname])

    def _rope(self, x: Value, cos: np.ndarray, sin: np.ndarray) -> Value:
        dt = x.data.dtype
        rot = matmul(x, constant(self._rot.astype(dt)))
        return add(mul(x, constant(np.broadcast_to(cos.astype(dt), x.shape))),
                   mul(rot, constant(np.broadcast_to(sin.astype(dt), x.shape))))

    def forward(self, tokens) -> Value:
        """Logits of shape [T, V] for a 1-D token sequence or [B, T, V] for a batch."""
        cfg = self.config
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ValueError("tokens must be 1-D or 2-D")
        B, T = tokens.shape
        if T == 0 or T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} outside 1..{cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        cos, sin = rope_tables(cfg, np.arange(T))
        mask = np.tril(np.ones((T, T), dtype=bool))
        h = take_rows(self.params["embed"], tokens)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a = self._q(p + "attn_input_act", rmsnorm(h, self.params[p + "attn_norm"], cfg.norm_eps))
            q = linear(a, self._w(p + "wq"))
            k = linear(a, self._w(p + "wk"))
            v = linear(a, self._w(p + "wv"))
            if cfg.rotary:
                q = self._rope(q, cos, sin)
                k = self._rope(k, cos, sin)
            q = self._q(p + "query_out", q)
            k = self._q(p + "key_cache", k)
            v = self._q(p + "value_cache", v)
            qh = transpose(reshape(q, (B, T, H, hd)), (0, 2, 1, 3))
            kh = transpose(reshape(k, (B, T, H, hd)), (0, 2, 3, 1))
            vh = transpose(reshape(v, (B, T, H, hd)), (0, 2, 1, 3))
            scores = scale(matmul(qh, kh), 1.0 / math.sqrt(hd))
            probs = self._q(p + "attn_probs", softmax(scores, -1, mask))
            o = reshape(transpose(matmul(probs, vh), (0, 2, 1, 3)), (B, T, d))
            o = self._q(p + "o_input_act", o)
            h = add(h, linear(o, self._w(p + "wo")))
            m = self._q(p + "mlp_input_act", rmsnorm(h, self.params[p + "mlp_norm"], cfg.norm_eps))
            act = mul(silu(linear(m, self._w(p + "w_gate"))), linear(m, self._w(p + "w_up")))
            act = self._q(p + "down_input_act", act)
            h = add(h, linear(act, self._w(p + "w_down")))
        hn = self._q("head_input_act", rmsnorm(h, self.params["final_norm"], cfg.norm_eps))
        logits = linear(hn, self._w("head"))
        return reshape(logits, (T, cfg.vocab_size)) if single else logits

    __call__ = forward

    # -- cached incremental decoding (forward only) -------------------------

    def _q_np(self, name: str, x: np.ndarray) -> np.ndarray:
        q = self.quantizers.get(name)
        return x if q is None else q.apply_np(x)

    def _weights_np(self) -> dict[str, np.ndarray]:
        out = {}
        for n, v in self.params.items():
            q = self.quantizers.get(n)
            out[n] = v.data if q is None or not q.enabled else quantize_fake(v.data, q.step.values, q.spec).astype(v.data.dtype)
        return out

    def decode(self, tokens, store: "KVCacheStore") -> np.ndarray:
        """Run new tokens through the model, appending their keys/values to ``store``.

        Returns logits [n_new, V]. Attention reads previous positions from the
        (quantized) cache rather than recomputing them.
        """
        cfg = self.config
        tokens = np.asarray(tokens).reshape(-1)
        n = tokens.size
        start = store.length
        if start + n > cfg.max_seq_len:
            raise CacheCapacityError(f"cache holds {cfg.max_seq_len} positions")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        W = self._weights_np()
        H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        pos = np.arange(start, start + n)
        cos, sin = rope_tables(cfg, pos)
        dt = W["embed"].dtype
        cos, sin, rot = cos.astype(dt), sin.astype(dt), self._rot.astype(dt)
        h = W["embed"][tokens][None]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a = self._q_np(p + "attn_input_act", _rmsnorm_np(h, W[p + "attn_norm"], cfg.norm_eps))
            q, k, v = a @ W[p + "wq"].T, a @ W[p + "wk"].T, a @ W[p + "wv"].T
            if cfg.rotary:
                q = q * cos + (q @ rot) * sin
                k = k * cos + (k @ rot) * sin
            q = self._q_np(p + "query_out", q)
            kv_write(store, i, k[0], v[0])
            K, V = kv_read(store, i, upto=start + n)
            total = start + n
            qh = q.reshape(1, n, H, hd).transpose(0, 2, 1, 3)
            kh = K[None].reshape(1, total, H, hd).transpose(0, 2, 3, 1)
            vh = V[None].reshape(1, total, H, hd).transpose(0, 2, 1, 3)
            scores = (qh @ kh) * dt.type(1.0 / math.sqrt(hd))
            mask = (np.arange(total)[None, :] <= pos[:, None])
            z = np.where(mask, scores, -np.inf)
            z = z - z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            probs = (e / e.sum(axis=-1, keepdims=True)).astype(dt)
            probs = self._q_np(p + "attn_probs", probs)
            o = (probs @ vh).transpose(0, 2, 1, 3).reshape(1, n, d)
            o = self._q_np(p + "o_input_act", o)
            h = h + o @ W[p + "wo"].T
            m = self._q_np(p + "mlp_input_act", _rmsnorm_np(h, W[p + "mlp_norm"], cfg.norm_eps))
            g = m @ W[p + "w_gate"].T
            act = (g * (1.0 / (1.0 + np.exp(-g)))).astype(dt) * (m @ W[p + "w_up"].T)
            act = self._q_np(p + "down_input_act", act)
            h = h + act @ W[p + "w_down"].T
        store.length = start + n
        hn = self._q_np("head_input_act", _rmsnorm_np(h, W["final_norm"], cfg.norm_eps))
        return (hn @ W["head"].T)[0]


def _rmsnorm_np(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return ((x * inv) * gain).astype(x.dtype)


def _make_quantizers(cfg: ModelConfig, plan: PrecisionPlan, act_lr_multiplier: float,
                     grad_scale: bool) -> dict[str, Quantizer]:
    qs: dict[str, Quantizer] = {}

    def site(name: str, site_name: str):
        spec = plan[site_name]
        if spec is None:
            return
        step = None
        if not spec.dynamic:
            mult = 1.0 if spec.role is Role.WEIGHT else act_lr_multiplier
            step = StepSize.of(np.ones(()), learnable=True, lr_multiplier=mult)
        qs[name] = Quantizer(name, spec, step, grad_scale)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for a in LAYER_ACTS:
            site(p + a, a)
        for w in LAYER_WEIGHTS:
            site(p + w, WEIGHT_SITE[w])
    site("head_input_act", "head_input_act")
    site("head", "head_weight")
    return qs


def build_quantized_model(config: ModelConfig, plan: PrecisionPlan | str | None,
                          base_weights: dict[str, np.ndarray], weight_calib: str = "mse",
                          act_lr_multiplier: float = 50.0, grad_scale: bool = True) -> QuantizedModel:
    """Wrap base weights with one quantizer per plan site.

    Weight step sizes are calibrated immediately (per output channel); static
    activation step sizes start at 1 until :func:`calibrate_activations` runs.
    """
    plan = PrecisionPlan.parse(plan)
    shapes = weight_shapes(config)
    for name, shape in shapes.items():
        if name not in base_weights:
            raise ValueError(f"missing base weight {name}")
        if tuple(np.shape(base_weights[name])) != shape:
            raise ValueError(f"weight {name} has shape {np.shape(base_weights[name])}, expected {shape}")
    params = {n: Value(base_weights[n], requires_grad=True, name=n) for n in shapes}
    qs = _make_quantizers(config, plan, act_lr_multiplier, grad_scale)
    calibrator = calib.WEIGHT_CALIBRATORS[weight_calib]
    for name, q in qs.items():
        if q.spec.role is Role.WEIGHT:
            s = calibrator(params[name].data, q.spec)
            q.step = StepSize.of(s, learnable=True, lr_multiplier=1.0)
    return QuantizedModel(config, plan, params, qs)


def calibrate_activations(model: QuantizedModel, batches, method: str = "percentile",
                          clip_range: bool = True) -> dict[str, float]:
    """Run calibration batches full-precision, collecting inputs at every static site."""
    model.set_observing(True)
    try:
        for b in batches:
            model.forward(b)
    finally:
        collected = {n: q.observed for n, q in model.quantizers.items() if q.observing}
        model.set_observing(False)
    steps = {}
    for name, chunks in collected.items():
        q = model.quantizers[name]
        if q.spec.dynamic:
            continue
        sample = calib.CalibSample(chunks, batches=len(chunks))
        if method == "percentile":
            s = calib.calibrate_percentile(sample, q.spec, min_count=1, clip_range=clip_range)
        elif method == "max":
            s = calib.calibrate_max(sample, q.spec)
        else:
            raise ValueError(f"unknown activation calibration method {method!r}")
        q.step.param.data[...] = s
        steps[name] = float(s)
    return steps


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

class CacheCapacityError(RuntimeError):
    pass


@dataclass
class KVCacheStore:
    """Per-layer integer key/value payloads plus the step sizes that decode them."""

    n_layers: int
    max_len: int
    width: int
    key_spec: QuantizerSpec | None
    value_spec: QuantizerSpec | None
    key_steps: list = field(default_factory=list)
    value_steps: list = field(default_factory=list)
    length: int = 0
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    key_scales: list = field(default_factory=list)
    value_scales: list = field(default_factory=list)
    fill: list = field(default_factory=list)

    def __post_init__(self):
        int_t = lambda spec: np.float32 if spec is None else (np.int8 if spec.bits <= 8 else np.int16)
        self.keys = [np.zeros((self.max_len, self.width), int_t(self.key_spec)) for _ in range(self.n_layers)]
        self.values = [np.zeros((self.max_len, self.width), int_t(self.value_spec)) for _ in range(self.n_layers)]
        self.key_scales = [np.ones(self.max_len) for _ in range(self.n_layers)]
        self.value_scales = [np.ones(self.max_len) for _ in range(self.n_layers)]
        self.fill = [0] * self.n_layers

    @classmethod
    def for_model(cls, model: QuantizedModel) -> "KVCacheStore":
        cfg = model.config
        kq = [model.quantizers.get(f"layers.{i}.key_cache") for i in range(cfg.n_layers)]
        vq = [model.quantizers.get(f"layers.{i}.value_cache") for i in range(cfg.n_layers)]
        return cls(cfg.n_layers, cfg.max_seq_len, cfg.d_model,
                   kq[0].spec if kq[0] else None, vq[0].spec if vq[0] else None,
                   [q.step if q else None for q in kq], [q.step if q else None for q in vq])


def _encode(x: np.ndarray, spec, step, dtype):
    if spec is None:
        return x.astype(dtype), np.ones(x.shape[0])
    if spec.dynamic:
        s = compute_dynamic_scale(x, spec)
        s_rows = s.reshape(-1)
    else:
        s = step.values
        s_rows = np.broadcast_to(np.asarray(s, dtype=x.dtype).reshape(()), (x.shape[0],))
    return quantize_int(x, s, spec).astype(dtype), np.asarray(s_rows, np.float64)


def kv_write(store: KVCacheStore, layer: int, k: np.ndarray, v: np.ndarray) -> None:
    k, v = np.atleast_2d(k), np.atleast_2d(v)
    n = k.shape[0]
    pos = store.fill[layer]
    if n < 1 or pos + n > store.max_len:
        raise CacheCapacityError(f"writing {n} positions at {pos} exceeds capacity {store.max_len}")
    kk, ks = _encode(k, store.key_spec, store.key_steps[layer] if store.key_steps else None,
                     store.keys[layer].dtype)
    vv, vs = _encode(v, store.value_spec, store.value_steps[layer] if store.value_steps else None,
                     store.values[layer].dtype)
    store.keys[layer][pos:pos + n] = kk
    store.values[layer][pos:pos + n] = vv
    store.key_scales[layer][pos:pos + n] = ks
    store.value_scales[layer][pos:pos + n] = vs
    store.fill[layer] = pos + n
    store.length = max(store.length, min(store.fill))


def kv_read(store: KVCacheStore, layer: int, upto: int | None = None, dtype=None):
    """Dequantized keys and values for positions ``[0, upto)``."""
    n = store.fill[layer] if upto is None else upto
    dtype = dtype or get_default_dtype()
    ks = store.key_scales[layer][:n].astype(dtype)[:, None]
    vs = store.value_scales[layer][:n].astype(dtype)[:, None]
    return store.keys[layer][:n].astype(dtype) * ks, store.values[layer][:n].astype(dtype) * vs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def next_token_loss(model: QuantizedModel, tokens: np.ndarray, mask: np.ndarray | None = None) -> Value:
    """Mean teacher-forced next-token cross-entropy over valid target positions."""
    tokens = np.atleast_2d(tokens)
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    mask = np.ones(tgt.shape, bool) if mask is None else np.asarray(mask, bool)
    logits = model.forward(inp)
    V = model.config.vocab_size
    flat = reshape(logits, (-1, V))
    rows = np.flatnonzero(mask.reshape(-1))
    picked = take_rows(flat, rows)
    onehot = np.zeros(picked.shape, dtype=picked.data.dtype)
    onehot[np.arange(rows.size), tgt.reshape(-1)[rows]] = 1
    return cross_entropy_soft(picked, onehot)


def eval_loss(model: QuantizedModel, batches) -> float:
    """Token-weighted mean next-token loss over ``(tokens, mask)`` batches."""
    total, count = 0.0, 0
    for tokens, mask in batches:
        tokens = np.atleast_2d(tokens)
        if tokens.shape[1] < 2:
            raise ValueError("evaluation sequences need at least 2 tokens")
        n = int(np.asarray(mask, bool).sum())
        if n == 0:
            continue
        total += float(next_token_loss(model, tokens, mask).data) * n
        count += n
    if count == 0:
        raise ValueError("empty evaluation corpus")
    return total / count


def eval_perplexity(model: QuantizedModel, batches) -> float:
    return math.exp(eval_loss(model, batches))

