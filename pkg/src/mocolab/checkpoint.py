"""DLCK binary checkpoints.

Layout (little-endian)::

    b"DLCK" | version u32 | n_tensors u32
    n_tensors x [ name_len u32 | name utf-8 | rank u32 | extents u64 x rank | float32 payload ]
    step u64 | state_len u32 | state (canonical JSON: rng state, cursors, bookkeeping)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError

MAGIC = b"DLCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int
    state: dict = field(default_factory=dict)


def checkpoint_save(path, tensors: dict[str, np.ndarray], step: int, state: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    blob = json.dumps(state or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<QI", step, len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a DLCK checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(
            f"{path}: checkpoint format version {version} is not supported by this build "
            f"(expected {VERSION}); re-run training to produce a fresh checkpoint"
        )
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float64)
    step, state_len = r.unpack("<QI")
    state = json.loads(r.take(state_len).decode("utf-8"))
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(tensors, int(step), state)
