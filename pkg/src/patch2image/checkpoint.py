"""Checkpoint files: a small sectioned binary format.

Layout (all integers little-endian):

    magic  b"P2IMCKPT"
    u32    format version (currently 1)
    u32    section count
    then per section:
      u16 + utf8   section name
      u64          payload byte length
      bytes        payload
      u32          crc32 of the payload

Sections: "topology" (JSON), "params" and "bn_buffers" (packed arrays),
optionally "optimizer" (packed arrays + JSON header), "meta" (JSON).
Every load verifies magic, version and each section's checksum before
touching any content; anything off raises CheckpointError.

Arrays are stored with their dtype. Loading float32 values into a float64
network widens exactly and is reported; the lossy direction is refused
unless explicitly requested.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, UsageError
from .graph import NetworkGraph
from .layers import BatchNorm

MAGIC = b"P2IMCKPT"
VERSION = 1


def _w_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise UsageError(f"name too long: {s[:40]}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _r_str(buf) -> str:
    (n,) = struct.unpack("<H", _take(buf, 2))
    return _take(buf, n).decode("utf-8")


def _take(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        _w_str(buf, name)
        _w_str(buf, arr.dtype.name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        raw = arr.tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    return buf.getvalue()


def _unpack_arrays(payload: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(payload)
    (count,) = struct.unpack("<I", _take(buf, 4))
    out = {}
    for _ in range(count):
        name = _r_str(buf)
        dtype = np.dtype(_r_str(buf))
        (ndim,) = struct.unpack("<B", _take(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _take(buf, 4 * ndim)) if ndim else ()
        (nbytes,) = struct.unpack("<Q", _take(buf, 8))
        arr = np.frombuffer(_take(buf, nbytes), dtype=dtype).reshape(shape).copy()
        out[name] = arr
    return out


def _bn_layers(graph: NetworkGraph) -> list[BatchNorm]:
    out = []
    for layer in graph.layers:
        subs = layer._sublayers() if hasattr(layer, "_sublayers") else [layer]
        out.extend(s for s in subs if isinstance(s, BatchNorm))
    return out


def save_checkpoint(path, graph: NetworkGraph, *, optimizer=None, meta: dict | None = None) -> None:
    sections: list[tuple[str, bytes]] = []
    sections.append(("topology", json.dumps(graph.topology(), sort_keys=True).encode()))
    sections.append(("params", _pack_arrays({p.name: p.value for p in graph.all_params()})))
    bn = {}
    for layer in _bn_layers(graph):
        bn[f"{layer.name}.running_mean"] = layer.state.running_mean
        bn[f"{layer.name}.running_var"] = layer.state.running_var
        bn[f"{layer.name}.updates"] = np.array([layer.state.updates], dtype=np.int64)
    sections.append(("bn_buffers", _pack_arrays(bn)))
    if optimizer is not None:
        sections.append(("optimizer", optimizer.state_bytes()))
    sections.append(("meta", json.dumps(meta or {}, sort_keys=True).encode()))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for name, payload in sections:
            head = io.BytesIO()
            _w_str(head, name)
            fh.write(head.getvalue())
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


@dataclass
class Checkpoint:
    topology: dict
    params: dict[str, np.ndarray]
    bn_buffers: dict[str, np.ndarray]
    optimizer: bytes | None
    meta: dict
    widened: list[str] = field(default_factory=list)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _take(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
        sections = {}
        for _ in range(count):
            name = _r_str(fh)
            (nbytes,) = struct.unpack("<Q", _take(fh, 8))
            payload = _take(fh, nbytes)
            (crc,) = struct.unpack("<I", _take(fh, 4))
            if zlib.crc32(payload) != crc:
                raise CheckpointError(f"{path}: section {name!r} failed its checksum")
            sections[name] = payload
    for required in ("topology", "params", "bn_buffers", "meta"):
        if required not in sections:
            raise CheckpointError(f"{path}: missing section {required!r}")
    return Checkpoint(
        topology=json.loads(sections["topology"]),
        params=_unpack_arrays(sections["params"]),
        bn_buffers=_unpack_arrays(sections["bn_buffers"]),
        optimizer=sections.get("optimizer"),
        meta=json.loads(sections["meta"]),
    )


def _assign(dst: np.ndarray, src: np.ndarray, name: str, widened: list[str],
            allow_narrowing: bool) -> None:
    if dst.shape != tuple(src.shape):
        raise CheckpointError(f"{name}: checkpoint shape {src.shape} != network {dst.shape}")
    if src.dtype != dst.dtype:
        if src.dtype == np.float32 and dst.dtype == np.float64:
            widened.append(name)  # exact: every float32 is a float64
        elif not allow_narrowing:
            raise CheckpointError(
                f"{name}: refusing lossy load {src.dtype} -> {dst.dtype}; "
                f"pass allow_narrowing=True to force"
            )
    dst[...] = src


def restore_into(graph: NetworkGraph, ckpt: Checkpoint, *, strict: bool = True,
                 allow_narrowing: bool = False) -> dict:
    """Copy checkpoint values into an existing graph, matching by name.

    strict demands an exact one-to-one match of parameter names; otherwise
    the intersection is loaded and the mismatch is reported in the result
    ({'missing': [...], 'unexpected': [...], 'widened': [...]}) so callers
    that load a patch checkpoint into a bigger image network can verify
    exactly which pieces stayed at initialization.
    """
    own = {p.name: p for p in graph.all_params()}
    missing = sorted(set(own) - set(ckpt.params))      # in graph, not in file
    unexpected = sorted(set(ckpt.params) - set(own))   # in file, not in graph
    if strict and (missing or unexpected):
        raise CheckpointError(
            f"parameter sets differ: graph-only {missing[:4]}, file-only {unexpected[:4]}"
        )
    widened: list[str] = []
    for name, p in own.items():
        if name in ckpt.params:
            _assign(p.value, ckpt.params[name], name, widened, allow_narrowing)
    bn_missing = []
    for layer in _bn_layers(graph):
        for suffix, dst in (("running_mean", layer.state.running_mean),
                            ("running_var", layer.state.running_var)):
            key = f"{layer.name}.{suffix}"
            if key in ckpt.bn_buffers:
                _assign(dst, ckpt.bn_buffers[key], key, widened, allow_narrowing)
            else:
                bn_missing.append(key)
        ukey = f"{layer.name}.updates"
        if ukey in ckpt.bn_buffers:
            layer.state.updates = int(ckpt.bn_buffers[ukey][0])
    if strict and bn_missing:
        raise CheckpointError(f"checkpoint lacks normalization buffers: {bn_missing[:4]}")
    return {"missing": missing, "unexpected": unexpected, "widened": widened,
            "bn_missing": bn_missing}


def load_graph(path) -> tuple[NetworkGraph, Checkpoint]:
    """Rebuild the stored network wholesale: topology, weights, buffers."""
    ckpt = load_checkpoint(path)
    graph = NetworkGraph.from_topology(ckpt.topology)
    restore_into(graph, ckpt, strict=True)
    return graph, ckpt
