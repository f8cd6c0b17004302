"""Versioned binary container of named f32 tensors.

Layout, all little-endian::

    b"PLPT" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"PLPT"
VERSION = 1


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}",
                field=field,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected PLPT", field="magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    (count,) = r.unpack("<I", "tensor_count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor[{i}].name_length")
        try:
            name = r.take(name_len, f"tensor[{i}].name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("name is not UTF-8", field=f"tensor[{i}].name") from exc
        (rank,) = r.unpack("<I", f"{name}.rank")
        dims = r.unpack(f"<{rank}Q", f"{name}.dims")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"{name}.payload")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", field="trailer")
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
