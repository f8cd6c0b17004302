"""FASTA, PDB (ATOM records) and DSSP 8-class label parsing."""

from __future__ import annotations

from ..encoders import ALPHABET, AminoAcidSequence
from ..errors import NotFoundError, ParseError

THREE_TO_ONE = {
    "ALA": "A",
    "ARG": "R",
    "ASN": "N",
    "ASP": "D",
    "CYS": "C",
    "GLN": "Q",
    "GLU": "E",
    "GLY": "G",
    "HIS": "H",
    "ILE": "I",
    "LEU": "L",
    "LYS": "K",
    "MET": "M",
    "PHE": "F",
    "PRO": "P",
    "SER": "S",
    "THR": "T",
    "TRP": "W",
    "TYR": "Y",
    "VAL": "V",
}

SS8 = "HGIEBTSC"


def _text(data: bytes | str, source) -> str:
    if isinstance(data, str):
        return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc.reason})", source=source) from exc


def parse_fasta(data: bytes | str, source=None) -> list[AminoAcidSequence]:
    text = _text(data, source)
    records: list[AminoAcidSequence] = []
    header_line = None
    current_id = None
    chunks: list[str] = []

    def flush():
        if current_id is None:
            return
        if not chunks:
            raise ParseError(f"record {current_id!r} has an empty sequence", line=header_line, source=source)
        records.append(AminoAcidSequence(current_id, "".join(chunks)))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            parts = line[1:].split()
            if not parts:
                raise ParseError("header without an id", line=lineno, source=source)
            current_id, header_line, chunks = parts[0], lineno, []
            continue
        if current_id is None:
            raise ParseError("sequence data before the first '>' header", line=lineno, source=source)
        seq = line.upper()
        for col, ch in enumerate(seq, start=1):
            if ch not in ALPHABET:
                raise ParseError(
                    f"invalid residue {ch!r} at column {col}", line=lineno, source=source
                )
        chunks.append(seq)
    flush()
    return records


def format_fasta(records, width: int = 60) -> str:
    lines = []
    for rec in records:
        lines.append(f">{rec.id}")
        for i in range(0, len(rec.residues), width):
            lines.append(rec.residues[i : i + width])
    return "\n".join(lines) + "\n" if lines else ""


def parse_pdb_chain(data: bytes | str, chain_id: str, source=None, protein_id: str | None = None) -> AminoAcidSequence:
    """Residue sequence of one chain from ATOM records (first model only).

    One residue per (sequence number, insertion code); alternate locations
    collapse into that residue. Unknown residue names become 'X'.
    """
    text = _text(data, source)
    residues: list[str] = []
    seen: set[tuple[int, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6]
        if record.startswith("ENDMDL") and residues:
            break
        if record != "ATOM  ":
            continue
        if len(line) < 27:
            raise ParseError(
                f"ATOM record is {len(line)} columns, need at least 27", line=lineno, source=source
            )
        if line[21] != chain_id:
            continue
        res_name = line[17:20].strip()
        try:
            res_seq = int(line[22:26])
        except ValueError as exc:
            raise ParseError(
                f"residue number {line[22:26]!r} is not an integer", line=lineno, source=source
            ) from exc
        key = (res_seq, line[26])
        if key in seen:
            continue
        seen.add(key)
        residues.append(THREE_TO_ONE.get(res_name, "X"))
    if not residues:
        raise NotFoundError(f"chain {chain_id!r} not found" + (f" in {source}" if source else ""))
    return AminoAcidSequence(protein_id or f"chain_{chain_id}", "".join(residues))


def parse_ss8(s: str) -> str:
    out = []
    for i, ch in enumerate(s):
        if ch == "-":
            out.append("C")
        elif ch in SS8:
            out.append(ch)
        else:
            raise ParseError(f"invalid secondary-structure label {ch!r}", index=i)
    return "".join(out)
