"""Token-level caption metrics: BLEU, ROUGE-L, a METEOR-style score, CIDEr, exact match.

All functions take token lists (strings or ids) rather than raw text so one
shared tokenisation drives every score.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

from ..errors import ContractError

Tokens = Sequence[Hashable]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def clipped_counts(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    """(sum of clipped n-gram matches, total candidate n-grams)."""
    cand = ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            if c > max_ref[g]:
                max_ref[g] = c
    clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
    return clipped, sum(cand.values())


def effective_ref_length(c: int, references: Sequence[Tokens]) -> int:
    """Reference length closest to the candidate's; ties go to the shorter."""
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


@dataclass
class BleuDetail:
    score: float
    precisions: list[float]
    brevity_penalty: float
    degenerate: bool = False


def _weights(N: int, weights) -> list[float]:
    if N < 1:
        raise ContractError("BLEU order N must be >= 1")
    w = [1.0 / N] * N if weights is None else list(weights)
    if len(w) != N or abs(sum(w) - 1.0) > 1e-9:
        raise ContractError(f"BLEU weights must have length {N} and sum to 1")
    return w


def _combine(matches, totals, c, r, w) -> BleuDetail:
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = brevity_penalty(c, r)
    if any(p == 0.0 for p in precisions):
        return BleuDetail(0.0, precisions, bp)
    score = bp * math.exp(sum(wn * math.log(p) for wn, p in zip(w, precisions)))
    return BleuDetail(score, precisions, bp)


def bleu_detail(candidate: Tokens, references: Sequence[Tokens], N: int = 4, weights=None) -> BleuDetail:
    w = _weights(N, weights)
    if not references:
        raise ContractError("BLEU needs at least one reference")
    if len(candidate) == 0:
        return BleuDetail(0.0, [0.0] * N, 0.0, degenerate=True)
    counts = [clipped_counts(candidate, references, n) for n in range(1, N + 1)]
    c = len(candidate)
    return _combine([m for m, _ in counts], [t for _, t in counts], c, effective_ref_length(c, references), w)


def bleu(candidate: Tokens, references: Sequence[Tokens], N: int = 4, weights=None) -> float:
    return bleu_detail(candidate, references, N, weights).score


def corpus_bleu(pairs: Sequence[tuple[Tokens, Sequence[Tokens]]], N: int = 4, weights=None) -> float:
    """Precisions pooled over all candidates, brevity penalty on summed lengths."""
    w = _weights(N, weights)
    matches = [0] * N
    totals = [0] * N
    c_sum = r_sum = 0
    for cand, refs in pairs:
        c = len(cand)
        c_sum += c
        r_sum += effective_ref_length(c, refs)
        for n in range(1, N + 1):
            m, t = clipped_counts(cand, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if c_sum == 0:
        return 0.0
    return _combine(matches, totals, c_sum, r_sum, w).score


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    """LCS F-measure; recall over the reference length, precision over the candidate's."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


# ---------------------------------------------------------------------------
# METEOR-style


@dataclass
class Alignment:
    pairs: list[tuple[int, int]]
    matches: int
    chunks: int
    exhaustive: bool = True


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of matches adjacent in both candidate and reference order."""
    pairs = sorted(pairs)
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def align_exact(candidate: Tokens, reference: Tokens, node_limit: int = 200_000) -> Alignment:
    """Unigram alignment with the most matches, then the fewest chunks.

    Depth-first over candidate positions with branch-and-bound; if the search
    exceeds ``node_limit`` the best alignment found so far is returned with
    ``exhaustive=False``.
    """
    target = sum((Counter(candidate) & Counter(reference)).values())
    if target == 0:
        return Alignment([], 0, 0)
    ref_pos: dict = {}
    for j, tok in enumerate(reference):
        ref_pos.setdefault(tok, []).append(j)
    cand_left = Counter(candidate)
    ref_left = Counter(reference)
    used = [False] * len(reference)
    best: list = [None, math.inf]
    nodes = [0]
    path: list[tuple[int, int]] = []

    def possible() -> int:
        return sum(min(c, ref_left[t]) for t, c in cand_left.items() if c)

    def dfs(i: int, chunks: int, last) -> bool:
        nodes[0] += 1
        if nodes[0] > node_limit:
            return False
        if chunks >= best[1]:
            return True
        if len(path) == target:
            best[0], best[1] = list(path), chunks
            return True
        if i == len(candidate) or len(path) + possible() < target:
            return True
        tok = candidate[i]
        cand_left[tok] -= 1
        options = [j for j in ref_pos.get(tok, ()) if not used[j]]
        if last is not None and last[0] == i - 1 and (last[1] + 1) in options:
            options.remove(last[1] + 1)
            options.insert(0, last[1] + 1)
        for j in options:
            contiguous = last is not None and last == (i - 1, j - 1)
            used[j] = True
            ref_left[tok] -= 1
            path.append((i, j))
            ok = dfs(i + 1, chunks + (0 if contiguous else 1), (i, j))
            path.pop()
            ref_left[tok] += 1
            used[j] = False
            if not ok:
                cand_left[tok] += 1
                return False
        ok = dfs(i + 1, chunks, last)
        cand_left[tok] += 1
        return ok

    complete = dfs(0, 0, None)
    pairs = best[0] or []
    return Alignment(pairs, len(pairs), int(best[1]) if pairs else 0, exhaustive=complete)


def meteor_like(
    candidate: Tokens,
    reference: Tokens,
    alpha: float = 0.9,
    gamma: float = 0.5,
    theta: float = 3.0,
) -> float:
    """(1 - gamma * (chunks/matches)^theta) * F with F = (alpha^2 + 1) P / (R + alpha P)."""
    if not candidate or not reference:
        return 0.0
    al = align_exact(candidate, reference)
    if al.matches == 0:
        return 0.0
    p = al.matches / len(candidate)
    r = al.matches / len(reference)
    f = (alpha**2 + 1) * p / (r + alpha * p)
    penalty = gamma * (al.chunks / al.matches) ** theta
    return (1.0 - penalty) * f


# ---------------------------------------------------------------------------
# CIDEr


def _tfidf(counts: Counter, df: Counter, n_docs: int, smooth: bool) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    out = {}
    for g, c in counts.items():
        d = df.get(g, 0)
        idf = math.log(n_docs / (1.0 + d)) if smooth else math.log(n_docs / max(d, 1))
        out[g] = (c / total) * idf
    return out


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


@dataclass
class CiderResult:
    scores: list[float]
    mean: float
    per_order: list[list[float]] = field(default_factory=list)


def cider(
    corpus: Sequence[tuple[Tokens, Sequence[Tokens]]],
    N: int = 4,
    smooth_idf: bool = True,
    scale: float = 1.0,
) -> CiderResult:
    """Mean over n of the mean reference cosine between TF-IDF n-gram vectors.

    Document frequency counts corpus items whose references contain the n-gram.
    """
    if len(corpus) < 2:
        raise ContractError("CIDEr needs a corpus of at least two items for document frequencies")
    n_docs = len(corpus)
    per_order = []
    for n in range(1, N + 1):
        df: Counter = Counter()
        for _, refs in corpus:
            df.update(set().union(*(ngrams(r, n).keys() for r in refs)))
        order_scores = []
        for cand, refs in corpus:
            gc = _tfidf(ngrams(cand, n), df, n_docs, smooth_idf)
            sims = [_cosine(gc, _tfidf(ngrams(r, n), df, n_docs, smooth_idf)) for r in refs]
            order_scores.append(sum(sims) / len(sims))
        per_order.append(order_scores)
    scores = [scale * sum(per_order[n][i] for n in range(N)) / N for i in range(n_docs)]
    return CiderResult(scores, sum(scores) / n_docs, per_order)


# ---------------------------------------------------------------------------


def exact_match(candidate: str, gold: str) -> int:
    """1 iff the trimmed, case-folded strings are equal (no numeric coercion)."""
    return int(candidate.strip().casefold() == gold.strip().casefold())


@dataclass
class ScoredExample:
    id: str
    candidate: list
    references: list[list]
    candidate_text: str
    gold_text: str


def score_corpus(
    examples: Sequence[ScoredExample],
    extra: dict[str, Callable[[ScoredExample], float]] | None = None,
) -> dict:
    """Per-example and aggregate metric table.

    ``extra`` is a slot for embedding-similarity scorers that need pretrained
    encoders; each callable maps an example to a float.
    """
    extra = extra or {}
    corpus = [(ex.candidate, ex.references) for ex in examples]
    cid = cider(corpus).scores if len(examples) >= 2 else [float("nan")] * len(examples)
    rows = []
    for ex, c in zip(examples, cid):
        row = {
            "id": ex.id,
            "bleu1": bleu(ex.candidate, ex.references, N=1),
            "bleu4": bleu(ex.candidate, ex.references, N=4),
            "rougeL": max(rouge_l(ex.candidate, r) for r in ex.references),
            "meteor": max(meteor_like(ex.candidate, r) for r in ex.references),
            "cider": c,
            "exact_match": exact_match(ex.candidate_text, ex.gold_text),
        }
        for name, fn in extra.items():
            row[name] = float(fn(ex))
        rows.append(row)
    n = len(rows)
    agg = {
        "bleu1": corpus_bleu(corpus, N=1) if n else 0.0,
        "bleu4": corpus_bleu(corpus, N=4) if n else 0.0,
    }
    for key in ["rougeL", "meteor", "cider", "exact_match", *extra]:
        agg[key] = sum(r[key] for r in rows) / n if n else 0.0
    agg["count"] = n
    return {"aggregate": agg, "per_example": rows}
