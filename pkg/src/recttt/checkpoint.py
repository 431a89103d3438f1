"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian u32)::

    b"RCTT" | version | metadata length | metadata (UTF-8 JSON) | tensor count
    per tensor: name length | name (UTF-8) | rank | extents... | float32 payload
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"RCTT"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    """Checkpoint tensors do not match the model they are loaded into."""


@dataclass
class CheckpointFile:
    metadata: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: CheckpointFile) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        # asarray keeps rank-0 tensors rank 0 (ascontiguousarray would promote them)
        arr = np.asarray(arr, dtype="<f4")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode(buf: bytes) -> CheckpointFile:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {bytes(buf[:4])!r}")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"unsupported format version {version} (expected {VERSION})")
    try:
        metadata = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return CheckpointFile(metadata, tensors)


def save_checkpoint(path: str | Path, ckpt: CheckpointFile) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path: str | Path) -> CheckpointFile:
    return decode(Path(path).read_bytes())


def load_into(state: dict[str, np.ndarray], tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into live model arrays, checking names and shapes."""
    missing = state.keys() - tensors.keys()
    extra = tensors.keys() - state.keys()
    if missing or extra:
        raise LayoutError(f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for k, arr in tensors.items():
        if state[k].shape != arr.shape:
            raise LayoutError(f"{k}: model {state[k].shape}, checkpoint {arr.shape}")
        np.copyto(state[k], arr)
