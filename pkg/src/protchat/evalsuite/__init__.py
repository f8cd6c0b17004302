from .retrieval import (
    DIRECTIONS,
    PROTEIN_TO_TEXT,
    TEXT_TO_PROTEIN,
    RetrievalIndex,
    build_index,
    evaluate_retrieval,
    exhaustive_ptm_ranking,
    retrieval_metrics,
    retrieve,
)
from .text_metrics import (
    ScoredExample,
    align_exact,
    bleu,
    bleu_detail,
    cider,
    corpus_bleu,
    exact_match,
    lcs_length,
    meteor_like,
    rouge_l,
    score_corpus,
)

__all__ = [
    "DIRECTIONS",
    "PROTEIN_TO_TEXT",
    "TEXT_TO_PROTEIN",
    "RetrievalIndex",
    "ScoredExample",
    "align_exact",
    "bleu",
    "bleu_detail",
    "build_index",
    "cider",
    "corpus_bleu",
    "evaluate_retrieval",
    "exact_match",
    "exhaustive_ptm_ranking",
    "lcs_length",
    "meteor_like",
    "retrieval_metrics",
    "retrieve",
    "rouge_l",
    "score_corpus",
]
