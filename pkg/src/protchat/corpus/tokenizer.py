"""Word-level tokenizer with punctuation split off as separate tokens."""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

from ..autodiff.checkpoint import atomic_write_bytes
from ..errors import TokenizerError

PAD = "[PAD]"
CLS = "[CLS]"
DEC = "[DEC]"
SEP = "[SEP]"
BOS = "[BOS]"
EOS = "[EOS]"
UNK = "[UNK]"
PROTEIN_OPEN = "<Protein>"
PROTEIN_CLOSE = "</Protein>"
RESERVED = (PAD, CLS, DEC, SEP, BOS, EOS, UNK, PROTEIN_OPEN, PROTEIN_CLOSE)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def normalize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, vocab: list[str]):
        if tuple(vocab[: len(RESERVED)]) != RESERVED:
            raise TokenizerError("vocabulary must start with the reserved tokens")
        self.vocab = list(vocab)
        self.ids = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.ids) != len(self.vocab):
            raise TokenizerError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    def special(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise TokenizerError(f"unknown special token {token!r}") from None

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    def encode(self, text: str) -> list[int]:
        unk = self.ids[UNK]
        return [self.ids.get(tok, unk) for tok in normalize(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self.vocab[i]
            if skip_special and tok in RESERVED and tok != UNK:
                continue
            toks.append(tok)
        return " ".join(toks)

    def to_json(self) -> str:
        return json.dumps({"version": 1, "vocab": self.vocab}, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        return cls(json.loads(text)["vocab"])

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_tokenizer(texts: Iterable[str], max_vocab: int | None = None) -> Tokenizer:
    """Reserved tokens first, then most frequent words; ties break lexicographically."""
    counts = Counter()
    n = 0
    for text in texts:
        counts.update(normalize(text))
        n += 1
    if n == 0:
        raise TokenizerError("cannot build a tokenizer from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = None if max_vocab is None else max(0, max_vocab - len(RESERVED))
    words = [w for w, _ in ranked[:room]]
    return Tokenizer(list(RESERVED) + words)
