"""Binary checkpoint format.

Layout (little-endian)::

    b"AMK1" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_records | records... | u32 crc32(everything before it)

    record: u32 name_len | name (UTF-8) | u32 rank | rank * u64 dims | float64 data
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"AMK1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MissingCheckpointError(CheckpointError, FileNotFoundError):
    pass


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps 0-d shape
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 12:
        raise CorruptCheckpointError("checkpoint truncated")
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {buf[:4]!r}")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    body, tail = buf[:-4], buf[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise CorruptCheckpointError("checksum mismatch")
    r = _Reader(body)
    r.take(8)
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"bad metadata: {e}") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="strict")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last record")
    return meta, tensors


def write_file(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(meta, tensors))


def read_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.is_file():
        raise MissingCheckpointError(f"no checkpoint at {p}")
    return decode(p.read_bytes())
