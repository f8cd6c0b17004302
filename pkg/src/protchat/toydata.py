"""Seeded toy corpora in the instruction schema, for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .corpus import ProteinRecord
from .corpus.parsers import SS8
from .encoders import CANONICAL, AminoAcidSequence

FUNCTIONS = ["kinase", "protease", "transporter", "receptor", "chaperone", "ligase", "isomerase", "oxidase"]
PLACES = ["cytoplasm", "membrane", "nucleus", "mitochondrion"]
COFACTORS = ["zinc", "iron", "heme", "magnesium", "copper", "calcium"]
QUESTIONS = ["what is the function of this protein ?", "where is this protein located ?"]


def make_records(
    n: int,
    seed: int = 0,
    min_len: int = 20,
    max_len: int = 60,
    with_structure: bool = True,
    qa_per_record: int = 1,
) -> list[ProteinRecord]:
    """``n`` random proteins with distinct descriptions and answers.

    Answers combine a function word and a cofactor per protein, so they only
    depend on which protein is in the prompt, never on the question wording.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        residues = "".join(rng.choice(list(CANONICAL), size=length))
        func = FUNCTIONS[i % len(FUNCTIONS)]
        place = PLACES[(i // len(FUNCTIONS)) % len(PLACES)]
        cof = COFACTORS[(i * 5 + i // 8) % len(COFACTORS)]
        pid = f"toy{i:03d}"
        desc = f"{func} of the {place} that binds {cof} , entry {i}"
        answers = [f"a {cof} dependent {func}", f"in the {place}"]
        qa = [(QUESTIONS[j % 2], answers[j % 2]) for j in range(qa_per_record)]
        records.append(
            ProteinRecord(
                id=pid,
                sequence=AminoAcidSequence(pid, residues),
                ss8="".join(rng.choice(list(SS8), size=length)) if with_structure else None,
                ter_path="stub" if with_structure else None,
                description=desc,
                qa=qa,
            )
        )
    return records
