"""Checkpoint directories: a JSON manifest indexing raw little-endian tensor payloads.

Layout::

    <dir>/manifest.json   format version, metadata echo, tensor table
    <dir>/tensors.bin     concatenated payloads in manifest order

Tensor dtypes are ``f32``, ``i8`` and ``i4-packed`` (two signed nibbles per
byte, low nibble first). Integer tensors name the f32 tensor holding their
per-row step sizes.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import pack_int4, unpack_int4

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
DTYPES = ("f32", "i8", "i4-packed")


class CheckpointError(ValueError):
    pass


@dataclass
class TensorEntry:
    dtype: str
    data: np.ndarray
    scale: str | None = None


@dataclass
class Checkpoint:
    tensors: dict[str, TensorEntry]
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: e.data for n, e in self.tensors.items()}

    def dequantized(self) -> dict[str, np.ndarray]:
        """Float arrays, integer tensors multiplied back by their row scales."""
        out = {}
        for n, e in self.tensors.items():
            if e.dtype == "f32":
                out[n] = e.data
            else:
                s = self.tensors[e.scale].data.astype(np.float32)
                out[n] = e.data.astype(np.float32) * s.reshape((-1,) + (1,) * (e.data.ndim - 1))
        return out


def f32(arrays: dict[str, np.ndarray]) -> dict[str, TensorEntry]:
    return {n: TensorEntry("f32", np.asarray(a, dtype=np.float32)) for n, a in arrays.items()}


def _encode(e: TensorEntry) -> bytes:
    if e.dtype == "f32":
        return np.ascontiguousarray(e.data, dtype="<f4").tobytes()
    if e.dtype == "i8":
        a = np.asarray(e.data)
        if a.size and (a.min() < -128 or a.max() > 127):
            raise CheckpointError("i8 tensor out of range")
        return np.ascontiguousarray(a, dtype="i1").tobytes()
    if e.dtype == "i4-packed":
        return pack_int4(np.asarray(e.data))
    raise CheckpointError(f"unknown dtype {e.dtype}")


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def save(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = {}, [], 0
    for name in sorted(ckpt.tensors):
        e = ckpt.tensors[name]
        if e.dtype != "f32":
            if not e.scale or e.scale not in ckpt.tensors:
                raise CheckpointError(f"integer tensor {name} needs a scale tensor")
        raw = _encode(e)
        table[name] = {"dtype": e.dtype, "shape": list(np.shape(e.data)), "offset": offset,
                       "length": len(raw), "scale": e.scale}
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "meta": ckpt.meta, "tensors": table}
    atomic_write(path / PAYLOAD, b"".join(chunks))
    atomic_write(path / MANIFEST, manifest_bytes(manifest))
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {p}")
    with open(p) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{p}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    payload_path = path / PAYLOAD
    if not payload_path.exists():
        raise FileNotFoundError(f"no tensor payload at {payload_path}")
    raw = payload_path.read_bytes()
    spans = sorted((t["offset"], t["offset"] + t["length"], n) for n, t in manifest["tensors"].items())
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"tensors {a} and {b} overlap")
    tensors = {}
    for name, t in manifest["tensors"].items():
        dtype, shape = t["dtype"], tuple(t["shape"])
        if dtype not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype {dtype}")
        buf = raw[t["offset"]:t["offset"] + t["length"]]
        if len(buf) != t["length"]:
            raise CheckpointError(f"{name}: payload truncated")
        count = math.prod(shape)
        if dtype == "f32":
            data = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
        elif dtype == "i8":
            data = np.frombuffer(buf, dtype="i1").astype(np.int8).reshape(shape)
        else:
            data = unpack_int4(buf, count).reshape(shape)
        if dtype != "f32" and not t.get("scale"):
            raise CheckpointError(f"{name}: integer tensor without scale")
        tensors[name] = TensorEntry(dtype, data, t.get("scale"))
    for name, e in tensors.items():
        if e.scale is not None and e.scale not in tensors:
            raise CheckpointError(f"{name}: scale tensor {e.scale} missing")
    return Checkpoint(tensors, manifest.get("meta", {}))


def total_bytes(path: str | os.PathLike) -> int:
    path = Path(path)
    return (path / MANIFEST).stat().st_size + (path / PAYLOAD).stat().st_size
