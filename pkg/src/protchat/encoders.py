"""Frozen multi-level protein encoders.

Real sequence / secondary / tertiary encoders are replaced by a deterministic
stub (one-hot residues -> seeded random projection -> radius-2 window mix) and
by a loader for precomputed embedding files, both behind :func:`encode`.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import atomic_write_bytes
from .autodiff.tensor import Tensor
from .errors import AlphabetError, ContractError, FormatError

CANONICAL = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = CANONICAL + "X"
_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}

C_SEQ = 768
C_SEC = 8
C_TER = 512
MAX_LEN = 3000
WINDOW_RADIUS = 2
# symmetric triangular kernel over offsets -2..2
_WINDOW = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0


@dataclass(frozen=True)
class AminoAcidSequence:
    id: str
    residues: str

    def __post_init__(self):
        if not self.residues:
            raise ContractError(f"sequence {self.id!r} is empty")
        for i, ch in enumerate(self.residues):
            if ch not in _INDEX:
                raise AlphabetError(f"invalid residue {ch!r} in {self.id!r}", index=i)

    def __len__(self) -> int:
        return len(self.residues)


@dataclass
class MultiLevelEmbeddings:
    e_seq: Tensor
    e_sec: Tensor
    e_ter: Tensor

    def __post_init__(self):
        n = self.e_seq.shape[0]
        if self.e_sec.shape[0] != n or self.e_ter.shape[0] != n:
            raise ContractError(
                f"level lengths disagree: {self.e_seq.shape}, {self.e_sec.shape}, {self.e_ter.shape}"
            )
        if self.e_sec.shape[1] != C_SEC:
            raise ContractError(f"e_sec must have {C_SEC} channels, got {self.e_sec.shape[1]}")

    @property
    def n(self) -> int:
        return self.e_seq.shape[0]


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "stub"
    seed: int = 0
    path: str | None = None
    c_seq: int = C_SEQ
    c_ter: int = C_TER
    c_sec: int = field(default=C_SEC, init=False)

    def __post_init__(self):
        if self.kind not in ("stub", "file"):
            raise ContractError(f"unknown encoder kind {self.kind!r}")
        if self.c_seq <= 0 or self.c_ter <= 0:
            raise ContractError("encoder dims must be positive")
        if self.kind == "file":
            if not self.path or not os.access(self.path, os.R_OK):
                raise ContractError(f"embedding path {self.path!r} is not readable")


def one_hot(residues: str) -> np.ndarray:
    idx = np.fromiter((_INDEX[c] for c in residues), dtype=np.int64, count=len(residues))
    out = np.zeros((len(residues), len(ALPHABET)))
    out[np.arange(len(residues)), idx] = 1.0
    return out


def _projection(seed: int, level: int, width: int) -> np.ndarray:
    rng = np.random.default_rng([seed, level])
    return rng.normal(0.0, 1.0, size=(len(ALPHABET), width))


def _window_mix(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    padded = np.pad(x, ((WINDOW_RADIUS, WINDOW_RADIUS), (0, 0)))
    out = np.zeros_like(x)
    for k, w in enumerate(_WINDOW):
        out += w * padded[k : k + n]
    return out


def encode_stub(seq: AminoAcidSequence, spec: EncoderSpec, dtype=np.float32) -> MultiLevelEmbeddings:
    if spec.kind != "stub":
        raise ContractError("encode_stub needs an encoder spec of kind 'stub'")
    onehot = one_hot(seq.residues)
    levels = []
    for level, width in enumerate((spec.c_seq, C_SEC, spec.c_ter)):
        mixed = _window_mix(onehot @ _projection(spec.seed, level, width))
        if level == 1:
            mixed = 1.0 / (1.0 + np.exp(-mixed))
        levels.append(Tensor(mixed.astype(dtype), dtype=dtype))
    return MultiLevelEmbeddings(*levels)


def trim_sequence(seq: AminoAcidSequence, max_len: int = MAX_LEN, seed: int = 0) -> AminoAcidSequence:
    """Random contiguous window of ``max_len`` residues (identity when short enough)."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    n = len(seq)
    if n <= max_len:
        return seq
    start = int(np.random.default_rng(seed).integers(0, n - max_len + 1))
    return AminoAcidSequence(seq.id, seq.residues[start : start + max_len])


# ---------------------------------------------------------------------------
# embedding files:  b"PEMB" | version u32 | n u64 | c_seq u64 | c_ter u64 | f32 blocks

EMB_MAGIC = b"PEMB"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


def encode_embeddings(emb: MultiLevelEmbeddings) -> bytes:
    n, c_seq = emb.e_seq.shape
    c_ter = emb.e_ter.shape[1]
    parts = [_HEADER.pack(EMB_MAGIC, EMB_VERSION, n, c_seq, c_ter)]
    for t in (emb.e_seq, emb.e_sec, emb.e_ter):
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes) -> MultiLevelEmbeddings:
    if len(buf) < 4 or buf[:4] != EMB_MAGIC:
        raise FormatError("bad magic, expected PEMB", field="magic")
    if len(buf) < _HEADER.size:
        raise FormatError(f"header truncated at {len(buf)} bytes", field="header")
    _, version, n, c_seq, c_ter = _HEADER.unpack_from(buf)
    if version != EMB_VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    if n == 0 or c_seq == 0 or c_ter == 0:
        raise FormatError(f"zero dimension (n={n}, c_seq={c_seq}, c_ter={c_ter})", field="dims")
    blocks = []
    offset = _HEADER.size
    for name, width in (("e_seq", c_seq), ("e_sec", C_SEC), ("e_ter", c_ter)):
        size = 4 * n * width
        if offset + size > len(buf):
            raise FormatError(
                f"payload truncated: need {size} bytes at offset {offset}", field=name
            )
        arr = np.frombuffer(buf, dtype="<f4", count=n * width, offset=offset)
        blocks.append(Tensor(arr.reshape(n, width).astype(np.float32)))
        offset += size
    if offset != len(buf):
        raise FormatError(
            f"declared dims imply {offset} bytes but file has {len(buf)}", field="dims"
        )
    return MultiLevelEmbeddings(*blocks)


def save_embeddings(emb: MultiLevelEmbeddings, path) -> None:
    atomic_write_bytes(path, encode_embeddings(emb))


def load_embeddings(path) -> MultiLevelEmbeddings:
    return decode_embeddings(Path(path).read_bytes())


def encode(
    seq: AminoAcidSequence,
    spec: EncoderSpec,
    max_len: int = MAX_LEN,
    trim_seed: int = 0,
) -> MultiLevelEmbeddings:
    """The single entry point the pipeline uses for all three frozen encoders."""
    seq = trim_sequence(seq, max_len, trim_seed)
    if spec.kind == "stub":
        return encode_stub(seq, spec)
    emb = load_embeddings(spec.path)
    if emb.e_seq.shape[1] != spec.c_seq or emb.e_ter.shape[1] != spec.c_ter:
        raise FormatError(
            f"file dims ({emb.e_seq.shape[1]}, {emb.e_ter.shape[1]}) != spec "
            f"({spec.c_seq}, {spec.c_ter})",
            field="dims",
        )
    if emb.n > max_len:
        start = int(np.random.default_rng(trim_seed).integers(0, emb.n - max_len + 1))
        sl = slice(start, start + max_len)
        emb = MultiLevelEmbeddings(emb.e_seq[sl], emb.e_sec[sl], emb.e_ter[sl])
    return emb
