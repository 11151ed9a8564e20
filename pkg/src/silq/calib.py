"""Step-size initialisation: percentile, max, convex-MSE and LSQ-style."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .quant import STEP_FLOOR, Granularity, QuantizerSpec

PERCENTILES = {4: 99.91, 8: 99.99, 16: 99.995}


def percentile_for_bits(bits: int) -> float:
    try:
        return PERCENTILES[bits]
    except KeyError:
        raise ValueError(f"no calibration percentile for {bits}-bit activations") from None


@dataclass
class CalibSample:
    """Magnitudes collected at one quantizer site during calibration passes."""

    chunks: list[np.ndarray] = field(default_factory=list)
    batches: int = 0
    samples: int = 0

    def add(self, values: np.ndarray, samples: int = 0) -> None:
        self.chunks.append(np.abs(np.asarray(values)).reshape(-1))
        self.batches += 1
        self.samples += samples

    def values(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros(0)
        return np.concatenate(self.chunks)


def _magnitudes(samples) -> np.ndarray:
    v = samples.values() if isinstance(samples, CalibSample) else np.asarray(samples)
    return np.abs(v).reshape(-1).astype(np.float64)


def quantile_linear(a: np.ndarray, q: float) -> float:
    """Percentile ``q`` (0-100) interpolated linearly between order statistics."""
    a = np.asarray(a).reshape(-1)
    n = a.size
    pos = (q / 100.0) * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    part = np.partition(a, (lo, hi))
    frac = pos - lo
    return float(part[lo] + (part[hi] - part[lo]) * frac)


def calibrate_percentile(samples, spec: QuantizerSpec, min_count: int = 1000,
                         clip_range: bool = True) -> np.ndarray:
    """Step size from the bit-width's percentile of ``|x|``.

    With ``clip_range`` (default) the percentile marks the top of the integer
    range (``s = q / b_u``); otherwise the percentile itself is the step.
    """
    mags = _magnitudes(samples)
    if mags.size == 0:
        raise ValueError("no calibration samples")
    if mags.size < min_count:
        raise ValueError(f"need at least {min_count} calibration values, got {mags.size}")
    q = quantile_linear(mags, percentile_for_bits(spec.bits))
    s = q / spec.upper if clip_range else q
    return np.asarray(max(s, STEP_FLOOR))


def calibrate_max(samples, spec: QuantizerSpec) -> np.ndarray:
    mags = _magnitudes(samples)
    if mags.size == 0:
        raise ValueError("no calibration samples")
    return np.asarray(max(mags.max() / spec.upper, STEP_FLOOR))


def mse_bound(bits: int) -> float:
    return 2 ** (bits - 1) - 0.5


def approx_mse(w, s: float, bits: int) -> float:
    """Convex surrogate of the squared quantisation error of ``w`` at step ``s``."""
    if s <= 0:
        raise ValueError("step size must be positive")
    a = np.abs(np.asarray(w, dtype=np.float64)).reshape(-1)
    over = a - s * mse_bound(bits)
    clip = np.where(over > 0, over * over, 0.0)
    return float(np.maximum(s * s / 12.0, clip).sum())


def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   rel_tol: float = 1e-6, max_iter: int = 500) -> float:
    """Minimise a unimodal ``f`` on ``[lo, hi]``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if (b - a) <= rel_tol * max(abs(b), abs(a), 1e-300):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return c if fc <= fd else d


def mse_step(w, bits: int, rel_tol: float = 1e-6) -> float:
    """Golden-section minimiser of :func:`approx_mse` for one group of weights."""
    a = np.abs(np.asarray(w, dtype=np.float64)).reshape(-1)
    if a.size == 0:
        raise ValueError("empty weight group")
    m = a.max()
    if m == 0:
        return STEP_FLOOR
    hi = m / mse_bound(bits)
    return golden_section(lambda s: approx_mse(a, s, bits), STEP_FLOOR, hi, rel_tol)


def _per_group(w: np.ndarray, spec: QuantizerSpec, fn: Callable[[np.ndarray], float]) -> np.ndarray:
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    if spec.granularity is Granularity.PER_CHANNEL:
        rows = np.moveaxis(w, spec.axis, 0).reshape(w.shape[spec.axis], -1)
        return np.array([fn(r) for r in rows])
    return np.asarray(fn(w))


def calibrate_weight_mse(w, spec: QuantizerSpec | int, rel_tol: float = 1e-6) -> np.ndarray:
    if isinstance(spec, int):
        spec = QuantizerSpec(spec, "weight", "per-tensor")
    return _per_group(w, spec, lambda r: mse_step(r, spec.bits, rel_tol))


def lsq_init_step(w, bits: int) -> float:
    a = np.abs(np.asarray(w, dtype=np.float64))
    if a.size == 0:
        raise ValueError("empty weight group")
    s = 2.0 * a.mean() / math.sqrt(2 ** (bits - 1) - 1)
    return s if s > 0 else STEP_FLOOR


def calibrate_lsq_init(w, spec: QuantizerSpec | int) -> np.ndarray:
    if isinstance(spec, int):
        spec = QuantizerSpec(spec, "weight", "per-tensor")
    return _per_group(w, spec, lambda r: lsq_init_step(r, spec.bits))


ACT_CALIBRATORS = {"percentile": calibrate_percentile, "max": calibrate_max}
WEIGHT_CALIBRATORS = {"mse": calibrate_weight_mse, "lsq": calibrate_lsq_init}
