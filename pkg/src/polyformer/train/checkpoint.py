"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PFRM" | u32 version | u32 entry count
    per entry: u32 name length | name (utf-8) | u8 dtype code | u8 rank | u32 dims[rank] | raw data
    u32 metadata length | metadata (canonical JSON, utf-8)

Entries whose name starts with ``train/`` hold training state (optimizer
moments, discriminator); everything else is the inference model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..errors import FormatError

MAGIC = b"PFRM"
VERSION = 1
TRAIN_PREFIX = "train/"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def model_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(TRAIN_PREFIX)}

    def train_state(self) -> Dict[str, np.ndarray]:
        return {k[len(TRAIN_PREFIX):]: v for k, v in self.tensors.items() if k.startswith(TRAIN_PREFIX)}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.str)
        if code is None:
            raise TypeError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    meta = canonical_json(ckpt.metadata).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated: needed {n} bytes", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        at = pos
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}", at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    (mlen,) = struct.unpack("<I", take(4))
    at = pos
    try:
        metadata = json.loads(take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON: {exc}", at) from exc
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after metadata", pos)
    return Checkpoint(tensors, metadata)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
