"""How much of a weight change is a rotation?

For a pair of weight matrices the orthogonal Procrustes distance is the
residual left after the best rotation (left ``R @ A`` or right ``A @ R``).
That residual is the non-rotational distance; the Frobenius distance minus it
is the rotational distance. Both are normalised by the original weight's norm.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)

DOUBLY_ROTATED = ("wv", "wo")


@dataclass
class ProcrustesSolution:
    R: np.ndarray
    residual: float
    side: str


def _kabsch(M: np.ndarray, reflections: bool) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    if not reflections and np.linalg.det(U @ Vt) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
    return U @ Vt


def procrustes(A, B, side: str = "left", reflections: bool = False) -> ProcrustesSolution:
    """Best rotation aligning ``A`` to ``B`` on the given side.

    ``reflections=True`` allows any orthogonal matrix instead of det +1 only.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"procrustes needs equal 2-D shapes, got {A.shape} and {B.shape}")
    if side == "left":
        R = _kabsch(B @ A.T, reflections)
        res = np.linalg.norm(R @ A - B)
    elif side == "right":
        R = _kabsch(A.T @ B, reflections)
        res = np.linalg.norm(A @ R - B)
    else:
        raise ValueError("side must be 'left' or 'right'")
    return ProcrustesSolution(R, float(res), side)


@dataclass
class RotationEntry:
    name: str
    side: str
    rotational: float
    non_rotational: float
    frobenius: float
    procrustes: float
    layer_type: str = ""


def decompose(W0, W1, name: str = "", reflections: bool = False) -> RotationEntry | None:
    """Split ``W1 - W0`` into rotational and non-rotational parts.

    Returns None (with a warning) when ``W0`` has zero norm.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    W1 = np.asarray(W1, dtype=np.float64)
    if W0.shape != W1.shape:
        raise ValueError(f"{name or 'weights'}: shapes {W0.shape} and {W1.shape} differ")
    norm = np.linalg.norm(W0)
    if norm == 0:
        log.warning("skipping %s: original weight has zero norm", name or "<unnamed>")
        return None
    d_f = float(np.linalg.norm(W1 - W0))
    best = min((procrustes(W0, W1, s, reflections) for s in ("left", "right")),
               key=lambda sol: sol.residual)
    d_p = min(best.residual, d_f)
    return RotationEntry(name, best.side, (d_f - d_p) / norm, d_p / norm, d_f, d_p)


def default_layer_type(name: str) -> str | None:
    """``layers.3.wq`` -> ``wq``; ``head`` -> ``head``; anything else is unmapped."""
    m = re.fullmatch(r"(?:.*\.)?layers\.\d+\.(\w+)", name)
    if m:
        return m.group(1)
    if name == "head":
        return "head"
    return None


@dataclass
class RotationReport:
    entries: list[RotationEntry]
    averages: dict[str, dict[str, float]] = field(default_factory=dict)
    unmapped: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["layer\ttype\tside\trot\tnon_rot"]
        for e in self.entries:
            lines.append(f"{e.name}\t{e.layer_type}\t{e.side}\t{e.rotational:.9g}\t{e.non_rotational:.9g}")
        return "\n".join(lines) + "\n"

    def averages_tsv(self) -> str:
        lines = ["type\tcount\trot\tnon_rot"]
        for t, a in sorted(self.averages.items()):
            lines.append(f"{t}\t{int(a['count'])}\t{a['rot']:.9g}\t{a['non_rot']:.9g}")
        return "\n".join(lines) + "\n"


def aggregate_report(entries: Iterable[RotationEntry],
                     layer_type_map: dict[str, str] | Callable[[str], str | None] | None = None,
                     exclude_doubly_rotated: bool = False,
                     excluded_types: tuple[str, ...] = DOUBLY_ROTATED) -> RotationReport:
    """Average rotational / non-rotational distances per layer type."""
    entries = list(entries)
    if not entries:
        raise ValueError("no entries to aggregate")
    if layer_type_map is None:
        lookup = default_layer_type
    elif callable(layer_type_map):
        lookup = layer_type_map
    else:
        lookup = layer_type_map.get
    sums: dict[str, list[float]] = {}
    unmapped, excluded = [], []
    for e in entries:
        t = lookup(e.name)
        if t is None:
            unmapped.append(e.name)
            continue
        e.layer_type = t
        if exclude_doubly_rotated and t in excluded_types:
            excluded.append(e.name)
            continue
        acc = sums.setdefault(t, [0.0, 0.0, 0])
        acc[0] += e.rotational
        acc[1] += e.non_rotational
        acc[2] += 1
    averages = {t: {"rot": r / n, "non_rot": nr / n, "count": n} for t, (r, nr, n) in sums.items()}
    return RotationReport(entries, averages, unmapped, excluded)


def analyze(before: dict[str, np.ndarray], after: dict[str, np.ndarray], names: Iterable[str],
            reflections: bool = False, exclude_doubly_rotated: bool = False,
            layer_type_map=None) -> RotationReport:
    entries = []
    for n in names:
        if n not in before or n not in after:
            raise KeyError(f"tensor {n} missing from one of the checkpoints")
        e = decompose(before[n], after[n], n, reflections)
        if e is not None:
            entries.append(e)
    return aggregate_report(entries, layer_type_map, exclude_doubly_rotated)
