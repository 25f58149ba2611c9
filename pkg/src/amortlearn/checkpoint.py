"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"AMORTCK\\0"
    version    u32
    header_len u64, header (UTF-8 JSON: config snapshot, update counter, RNG state, ...)
    n_tensors  u32
    per tensor: name_len u32, name (UTF-8), ndim u32, shape u64 * ndim,
                data float32 * prod(shape)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .io_utils import atomic_write_bytes

MAGIC = b"AMORTCK\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def version(self) -> int:
        return int(self.header.get("format_version", FORMAT_VERSION))

    @property
    def update(self) -> int:
        return int(self.header.get("update", 0))

    @property
    def config(self) -> dict[str, Any]:
        return self.header.get("config", {})


def encode(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.header)
    header["format_version"] = FORMAT_VERSION
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(payload: bytes) -> Checkpoint:
    try:
        return _decode(payload)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _decode(payload: bytes) -> Checkpoint:
    view = memoryview(payload)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    header = json.loads(bytes(view[pos : pos + hlen]).decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = arr.astype(np.float32)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(header, tensors)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
