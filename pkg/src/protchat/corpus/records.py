"""Protein records, the line-delimited instruction schema, and seeded splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..encoders import AminoAcidSequence
from ..errors import ContractError, ParseError
from .parsers import parse_ss8


@dataclass
class ProteinRecord:
    id: str
    sequence: AminoAcidSequence
    ss8: str | None = None
    ter_path: str | None = None
    description: str = ""
    qa: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.ss8 is not None and len(self.ss8) != len(self.sequence):
            raise ContractError(
                f"{self.id}: ss8 length {len(self.ss8)} != sequence length {len(self.sequence)}"
            )
        for q, a in self.qa:
            if not q or not a:
                raise ContractError(f"{self.id}: empty question or answer")

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "sequence": self.sequence.residues}
        if self.ss8 is not None:
            out["ss8"] = self.ss8
        if self.ter_path is not None:
            out["ter_path"] = self.ter_path
        if self.description:
            out["description"] = self.description
        out["qa"] = [{"q": q, "a": a} for q, a in self.qa]
        return out


def _field_error(lineno, name, msg, source):
    return ParseError(f"field {name!r}: {msg}", line=lineno, source=source)


def parse_record(obj, lineno: int | None = None, source=None) -> ProteinRecord:
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", line=lineno, source=source)
    for name in ("id", "sequence"):
        if not isinstance(obj.get(name), str) or not obj[name]:
            raise _field_error(lineno, name, "required non-empty string", source)
    for name in ("ss8", "ter_path", "description"):
        if name in obj and not isinstance(obj[name], str):
            raise _field_error(lineno, name, "must be a string", source)
    try:
        seq = AminoAcidSequence(obj["id"], obj["sequence"].upper())
    except ParseError as exc:
        raise _field_error(lineno, "sequence", str(exc), source) from exc
    ss8 = None
    if "ss8" in obj:
        try:
            ss8 = parse_ss8(obj["ss8"])
        except ParseError as exc:
            raise _field_error(lineno, "ss8", str(exc), source) from exc
        if len(ss8) != len(seq):
            raise _field_error(
                lineno, "ss8", f"length {len(ss8)} != sequence length {len(seq)}", source
            )
    qa_raw = obj.get("qa", [])
    if not isinstance(qa_raw, list):
        raise _field_error(lineno, "qa", "must be an array", source)
    qa = []
    for j, pair in enumerate(qa_raw):
        if (
            not isinstance(pair, dict)
            or not isinstance(pair.get("q"), str)
            or not isinstance(pair.get("a"), str)
            or not pair["q"]
            or not pair["a"]
        ):
            raise _field_error(lineno, f"qa[{j}]", "needs non-empty string 'q' and 'a'", source)
        qa.append((pair["q"], pair["a"]))
    return ProteinRecord(
        id=obj["id"],
        sequence=seq,
        ss8=ss8,
        ter_path=obj.get("ter_path"),
        description=obj.get("description", ""),
        qa=qa,
    )


def parse_instructions(text: str, source=None) -> list[ProteinRecord]:
    records = []
    # "\n" only: splitlines() would also break on U+0085/U+2028 inside JSON strings
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=lineno, source=source) from exc
        records.append(parse_record(obj, lineno, source))
    return records


def load_instruction_file(path) -> list[ProteinRecord]:
    return parse_instructions(Path(path).read_text(encoding="utf-8"), source=str(path))


def dump_instructions(records) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for r in records)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    eval: tuple[str, ...]
    seed: int


def split_dataset(corpus, eval_count: int, seed: int) -> DatasetSplit:
    """Seeded shuffle; the first ``eval_count`` shuffled ids are held out."""
    ids = [r.id if isinstance(r, ProteinRecord) else str(r) for r in corpus]
    if eval_count < 0 or (eval_count > 0 and eval_count >= len(ids)):
        raise ContractError(f"eval_count {eval_count} must be < corpus size {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate ids in corpus")
    order = np.random.default_rng(seed).permutation(len(ids))
    held = {ids[i] for i in order[:eval_count]}
    return DatasetSplit(
        train=tuple(i for i in ids if i not in held),
        eval=tuple(i for i in ids if i in held),
        seed=seed,
    )
