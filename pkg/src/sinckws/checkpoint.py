"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SKWS" | u32 version | u32 header_len | header (UTF-8 JSON) | payload | u32 crc32

The header holds the model config, training metadata and a tensor
directory ``[{name, kind, shape}]``; the payload is the tensors in directory
order as float32.  The CRC covers every byte before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .model import KWSModel, ModelConfig

MAGIC = b"SKWS"
VERSION = 1


class CheckpointError(Exception):
    """Malformed, corrupted or incompatible checkpoint file."""


def _tensors(model: KWSModel) -> list[tuple[str, str, np.ndarray]]:
    out = [(name, "param", p.data) for name, p in model.named_parameters().items()]
    for name, st in model.bn_states().items():
        out.append((f"{name}.running_mean", "buffer", st.running_mean))
        out.append((f"{name}.running_var", "buffer", st.running_var))
    return out


def to_bytes(model: KWSModel, metadata: Optional[dict] = None) -> bytes:
    tensors = _tensors(model)
    header = {
        "config": model.config.to_dict(),
        "metadata": dict(metadata or {}),
        "bn_batches": {name: st.num_batches_tracked for name, st in model.bn_states().items()},
        "tensors": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in tensors],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in tensors)
    blob = MAGIC + struct.pack("<II", VERSION, len(head)) + head + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(model: KWSModel, path, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, metadata))
    tmp.replace(path)
    return path


def from_bytes(blob: bytes) -> tuple[KWSModel, dict]:
    if len(blob) < 16:
        raise CheckpointError("file truncated")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, not a checkpoint")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checksum mismatch (file corrupted or truncated)")
    start = 12
    if start + head_len > len(blob) - 4:
        raise CheckpointError("file truncated inside header")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc

    model = KWSModel(config, dtype=np.float32)
    expected = {n: (k, a) for n, k, a in _tensors(model)}
    offset = start + head_len
    payload_end = len(blob) - 4
    seen = set()
    states = {f"{n}.running_mean": (st, "running_mean") for n, st in model.bn_states().items()}
    states.update({f"{n}.running_var": (st, "running_var") for n, st in model.bn_states().items()})
    params = model.named_parameters()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"unknown tensor name {name!r}")
        if name in seen:
            raise CheckpointError(f"duplicate tensor {name!r}")
        if expected[name][1].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {shape}, model expects {expected[name][1].shape}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > payload_end:
            raise CheckpointError("file truncated inside tensor payload")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
        seen.add(name)
        if name in params:
            params[name].data = arr
        else:
            st, attr = states[name]
            setattr(st, attr, arr)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    if offset != payload_end:
        raise CheckpointError("trailing bytes after tensor payload")
    for name, st in model.bn_states().items():
        st.num_batches_tracked = int(header.get("bn_batches", {}).get(name, 0))
    return model, header.get("metadata", {})


def load_checkpoint(path) -> tuple[KWSModel, dict]:
    """Returns the model and the stored training metadata."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return from_bytes(blob)
