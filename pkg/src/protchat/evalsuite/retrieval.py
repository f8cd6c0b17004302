"""Protein-text retrieval: PTC similarity shortlist, PTM re-rank."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Tensor
from ..errors import ContractError
from ..plp import AttentionMaskMode, PlpFormer, ProteinBatch, TextBatch, ptc_similarity, ptm_logits

PROTEIN_TO_TEXT = "protein->text"
TEXT_TO_PROTEIN = "text->protein"
DIRECTIONS = (PROTEIN_TO_TEXT, TEXT_TO_PROTEIN)


@dataclass
class RetrievalIndex:
    """Per-item PLP query outputs and text [CLS] outputs, plus the raw inputs
    the PTM head needs for re-scoring."""

    ids: list[str]
    query_emb: np.ndarray  # (N, nq, d)
    text_cls: np.ndarray  # (N, d)
    proteins: ProteinBatch
    texts: TextBatch

    def __post_init__(self):
        n = len(self.ids)
        if n == 0:
            raise ContractError("retrieval index is empty")
        if not (self.query_emb.shape[0] == self.text_cls.shape[0] == self.proteins.batch_size == self.texts.batch_size == n):
            raise ContractError("retrieval index fields have mismatched lengths")
        if not (np.isfinite(self.query_emb).all() and np.isfinite(self.text_cls).all()):
            raise ContractError("retrieval index holds non-finite embeddings")

    def __len__(self) -> int:
        return len(self.ids)

    def similarity(self) -> np.ndarray:
        """(N proteins, N texts) PTC similarity."""
        return ptc_similarity(Tensor(self.query_emb), Tensor(self.text_cls)).data


def build_index(model: PlpFormer, ids: Sequence[str], proteins: ProteinBatch, texts: TextBatch) -> RetrievalIndex:
    """Unimodal forward: queries never see text and text never sees queries."""
    if len(ids) == 0:
        raise ContractError("retrieval index is empty")
    with T.no_record():
        q, t = model.forward(proteins, texts, AttentionMaskMode.UNIMODAL)
    return RetrievalIndex(list(ids), q.data.copy(), t.data[:, 0].copy(), proteins, texts)


def _pair_scores(model: PlpFormer, index: RetrievalIndex, pidx, tidx) -> np.ndarray:
    with T.no_record():
        return ptm_logits(model, index.proteins.take(pidx), index.texts.take(tidx)).data.astype(np.float64)


def _order(ids: Sequence[str], cands: np.ndarray, ptm: np.ndarray, ptc: np.ndarray) -> list[str]:
    keyed = sorted(zip(cands, ptm, ptc), key=lambda r: (-r[1], -r[2], ids[r[0]]))
    return [ids[c] for c, _, _ in keyed]


def _sides(index: RetrievalIndex, query: int, direction: str):
    if direction not in DIRECTIONS:
        raise ContractError(f"unknown retrieval direction {direction!r}")
    if not 0 <= query < len(index):
        raise ContractError(f"query {query} outside index of size {len(index)}")
    sim = index.similarity()
    return sim[query] if direction == PROTEIN_TO_TEXT else sim[:, query]


def _pairs(query: int, cands: np.ndarray, direction: str):
    fixed = np.full(len(cands), query)
    return (fixed, cands) if direction == PROTEIN_TO_TEXT else (cands, fixed)


def retrieve(
    index: RetrievalIndex,
    query: int,
    direction: str,
    k_rank: int,
    model: PlpFormer,
) -> list[str]:
    """Rank gallery ids for item ``query`` (a protein or a text, by direction).

    The top ``k_rank`` by PTC similarity are re-scored by the PTM logit and
    placed first, ordered by PTM, then PTC, then id. The rest follow in PTC order.
    """
    if not 1 <= k_rank <= len(index):
        raise ContractError(f"k_rank must be in [1, {len(index)}], got {k_rank}")
    ptc = _sides(index, query, direction).astype(np.float64)
    by_ptc = sorted(range(len(index)), key=lambda j: (-ptc[j], index.ids[j]))
    top = np.asarray(by_ptc[:k_rank])
    ptm = _pair_scores(model, index, *_pairs(query, top, direction))
    head = _order(index.ids, top, ptm, ptc[top])
    return head + [index.ids[j] for j in by_ptc[k_rank:]]


def exhaustive_ptm_ranking(index: RetrievalIndex, query: int, direction: str, model: PlpFormer) -> list[str]:
    """Reference ordering: every candidate scored by PTM one pair at a time."""
    ptc = _sides(index, query, direction).astype(np.float64)
    cands = np.arange(len(index))
    ptm = np.array([_pair_scores(model, index, *_pairs(query, np.array([c]), direction))[0] for c in cands])
    return _order(index.ids, cands, ptm, ptc)


def retrieval_metrics(ranked: Sequence[Sequence[str]], gold: Sequence[str], k: int = 20) -> tuple[float, float]:
    """(Acc = gold at rank 1, R@k = gold within the top k), averaged over queries."""
    if len(ranked) != len(gold):
        raise ContractError("ranked lists and gold ids differ in length")
    if not gold:
        return 0.0, 0.0
    acc = sum(1 for r, g in zip(ranked, gold) if r and r[0] == g)
    rk = sum(1 for r, g in zip(ranked, gold) if g in list(r)[:k])
    return acc / len(gold), rk / len(gold)


def evaluate_retrieval(index: RetrievalIndex, model: PlpFormer, k_rank: int = 16) -> dict[str, float]:
    """Acc and R@20 in both directions, every index item used once as a query."""
    k_rank = min(k_rank, len(index))
    out = {}
    for direction, tag in ((PROTEIN_TO_TEXT, "p2t"), (TEXT_TO_PROTEIN, "t2p")):
        ranked = [retrieve(index, i, direction, k_rank, model) for i in range(len(index))]
        acc, r20 = retrieval_metrics(ranked, index.ids)
        out[f"{tag}_acc"] = acc
        out[f"{tag}_r20"] = r20
    return out
