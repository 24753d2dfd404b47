"""Binary checkpoint container.

Layout: magic ``b"TLMC"``, little-endian u32 version (1), u32 header length,
UTF-8 JSON header, then contiguous little-endian float32 tensors in manifest
order. Manifest offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from ..errors import CheckpointShapeMismatch, CorruptCheckpoint, VersionMismatch
from ..serializer import VOCAB_VERSION
from .config import ModelConfig
from .core import Params, param_shapes

MAGIC = b"TLMC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    meta: dict[str, Any] = field(default_factory=dict)


def _encode(tensors: Mapping[str, torch.Tensor], header: dict[str, Any]) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, manifest=manifest, payload_bytes=offset)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], header: dict[str, Any]) -> None:
    Path(path).write_bytes(_encode(tensors, header))


def save_checkpoint(params: Mapping[str, torch.Tensor], cfg: ModelConfig, path: str | Path,
                    meta: dict[str, Any] | None = None) -> None:
    header = {"kind": "model", "config": cfg.to_dict(), "vocab_version": VOCAB_VERSION,
              "meta": meta or {}}
    save_tensors(path, params, header)


def read_tensors(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """Parse the container without interpreting the config."""
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpoint(f"{path}: file too short")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: container version {version}, expected {VERSION}")
    start = _PREAMBLE.size + hlen
    if start > len(data):
        raise CorruptCheckpoint(f"{path}: header truncated")
    try:
        header = json.loads(data[_PREAMBLE.size:start].decode("utf-8"))
        manifest = header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header: {exc}") from exc
    payload = memoryview(data)[start:]
    tensors: dict[str, torch.Tensor] = {}
    expected_offset = 0
    for entry in manifest:
        try:
            name, shape, offset = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"{path}: malformed manifest entry {entry!r}") from exc
        if entry.get("dtype", "float32") != "float32":
            raise CorruptCheckpoint(f"{path}: unsupported dtype {entry.get('dtype')}")
        if offset != expected_offset:
            raise CorruptCheckpoint(f"{path}: tensor {name} at offset {offset}, expected {expected_offset}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CorruptCheckpoint(f"{path}: payload truncated inside {name}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CorruptCheckpoint(f"{path}: {len(payload) - expected_offset} unexpected trailing bytes")
    return header, tensors


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = read_tensors(path)
    if header.get("kind", "model") != "model":
        raise CorruptCheckpoint(f"{path}: not a model checkpoint (kind={header.get('kind')})")
    if header.get("vocab_version") != VOCAB_VERSION:
        raise VersionMismatch(f"{path}: vocabulary {header.get('vocab_version')!r}, expected {VOCAB_VERSION!r}")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: bad config: {exc}") from exc
    expected = param_shapes(cfg)
    if list(tensors) != list(expected):
        raise CheckpointShapeMismatch(f"{path}: tensor names do not match the config layout")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointShapeMismatch(f"{path}: {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
    return Checkpoint(cfg, tensors, header.get("meta", {}))


def file_digest(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
