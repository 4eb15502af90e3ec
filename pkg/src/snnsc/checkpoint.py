"""Flat binary checkpoints for split systems.

Layout (little-endian)::

    magic      4s   b"SNCK"
    version    u8   1
    meta_len   u32
    meta       utf-8 JSON (model configuration, free-form extras)
    count      u32  number of tensors
    per tensor:
        name_len u16, name utf-8, rank u8, dims u32[rank], payload f32[prod(dims)]

Tensors cover parameters and batch-norm running statistics, named by
their attribute path (``backbone.edge.layers.0.weight``). Payloads are f32,
so float32 models reload bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import SplitClassifier
from .baselines import CnnQuantSc
from .layers import Module
from .model import Geometry, Readout, SnnSc
from .neurons import SurrogateConfig
from .pipeline import SplitSystem

MAGIC = b"SNCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def module_tensors(module: Module, prefix: str = "") -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in module.named_parameters(prefix)}
    out.update(dict(module.named_buffers(prefix)))
    return out


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [struct.pack("<4sBI", MAGIC, VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    try:
        magic, version, meta_len = struct.unpack_from("<4sBI", raw, 0)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 9
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            dims = struct.unpack_from(f"<{rank}I", raw, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, meta


def load_into(module: Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy named tensors into ``module``; every slot must be present with a matching shape."""
    for name, p in module.named_parameters(prefix):
        p.data = _take(tensors, name, p.data.shape)
        p.grad = np.zeros_like(p.data)
    for m_prefix, m in _modules_with_prefix(module, prefix):
        for b in m._buffers:
            setattr(m, b, _take(tensors, m_prefix + b, getattr(m, b).shape))


def _modules_with_prefix(module: Module, prefix: str):
    yield prefix, module
    for name, child in module._children():
        yield from _modules_with_prefix(child, prefix + name + ".")


def _take(tensors, name, shape) -> np.ndarray:
    if name not in tensors:
        raise CheckpointError(f"checkpoint lacks tensor {name!r}")
    arr = tensors[name]
    if arr.shape != tuple(shape):
        raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {tuple(shape)}")
    return arr.copy()


def sc_config(sc) -> dict:
    g = sc.geometry
    geom = [g.c, g.h, g.w, g.c1, g.c2]
    if isinstance(sc, SnnSc):
        slope = sc.readout_node.surrogate.slope
        return {"kind": "snn", "geometry": geom, "time_steps": sc.time_steps,
                "readout": sc.readout.value, "surrogate_slope": slope}
    if isinstance(sc, CnnQuantSc):
        return {"kind": "cnn", "geometry": geom, "n_bits": sc.n_bits}
    raise TypeError(f"unsupported SC model {type(sc).__name__}")


def build_sc(cfg: dict):
    geometry = Geometry(*cfg["geometry"])
    if cfg["kind"] == "snn":
        return SnnSc(geometry, cfg["time_steps"], Readout(cfg["readout"]),
                     surrogate=SurrogateConfig(cfg.get("surrogate_slope", 4.0)))
    if cfg["kind"] == "cnn":
        return CnnQuantSc(geometry, cfg["n_bits"])
    raise CheckpointError(f"unknown SC kind {cfg['kind']!r}")


def save_system(path: str | Path, system: SplitSystem, extra: dict | None = None) -> None:
    meta = {"backbone": system.backbone.config(), "extra": extra or {}}
    tensors = module_tensors(system.backbone, "backbone.")
    if system.sc is not None:
        meta["sc"] = sc_config(system.sc)
        tensors.update(module_tensors(system.sc, "sc."))
    write_tensors(path, tensors, meta)


def load_system(path: str | Path) -> tuple[SplitSystem, dict]:
    """Rebuild a system from a checkpoint. Returns ``(system, extra_meta)``."""
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found; run `snnsc train` first")
    tensors, meta = read_tensors(path)
    backbone = SplitClassifier(**meta["backbone"])
    load_into(backbone, tensors, "backbone.")
    sc = None
    if "sc" in meta:
        sc = build_sc(meta["sc"])
        load_into(sc, tensors, "sc.")
    system = SplitSystem(backbone, sc)
    system.eval()
    return system, meta.get("extra", {})
