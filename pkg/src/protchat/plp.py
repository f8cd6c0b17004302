"""Query-token transformer that distils per-residue sequence features into a
fixed set of text-aligned vectors, plus its three pretraining objectives.

Queries and text share the self-attention layers; only query rows read the
protein features through cross-attention. The attention mask decides how much
the two streams see of each other:

* ``UNIMODAL``: queries see queries, text sees text (contrastive objective)
* ``MULTIMODAL_CAUSAL``: queries see queries, text sees all queries and its own prefix
* ``BIDIRECTIONAL``: everything sees everything (matching objective)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, normal
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape, Tensor
from .errors import ContractError

IGNORE = -100


class AttentionMaskMode(enum.Enum):
    UNIMODAL = "unimodal"
    MULTIMODAL_CAUSAL = "multimodal_causal"
    BIDIRECTIONAL = "bidirectional"


@dataclass
class PlpConfig:
    n_queries: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    vocab_size: int = 512
    max_text_len: int = 32
    c_seq: int = 768
    cross_attention_every: int = 1
    ptc_temperature: float = 0.07
    w_ptc: float = 1.0
    w_ptg: float = 1.0
    w_ptm: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_queries < 1:
            raise ContractError("n_queries must be >= 1")
        if self.cross_attention_every < 1:
            raise ContractError("cross_attention_every must be >= 1")


def mode_mask(mode: AttentionMaskMode, n_queries: int, text_len: int) -> np.ndarray:
    """Allowed-attention matrix over [queries ; text] (row attends to column)."""
    n = n_queries + text_len
    if mode is AttentionMaskMode.BIDIRECTIONAL:
        return np.ones((n, n), dtype=bool)
    m = np.zeros((n, n), dtype=bool)
    m[:n_queries, :n_queries] = True
    if mode is AttentionMaskMode.UNIMODAL:
        m[n_queries:, n_queries:] = True
    else:
        m[n_queries:, :n_queries] = True
        m[n_queries:, n_queries:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    return m


@dataclass
class TextBatch:
    """Token ids (B, L); row 0 of every sequence is the task token."""

    ids: np.ndarray
    pad_id: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ContractError(f"text ids must be (B, L), got {self.ids.shape}")

    @property
    def pad_mask(self) -> np.ndarray:
        return self.ids != self.pad_id

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    def take(self, idx) -> "TextBatch":
        return TextBatch(self.ids[np.asarray(idx)], self.pad_id)

    @classmethod
    def from_token_lists(
        cls,
        rows: Sequence[Sequence[int]],
        lead_id: int,
        pad_id: int,
        max_len: int,
        eos_id: int | None = None,
    ) -> "TextBatch":
        """Prefix the task token, append EOS if given, truncate and right-pad."""
        seqs = []
        for r in rows:
            body = list(r)
            if eos_id is not None:
                body = body[: max_len - 2] + [eos_id]
            else:
                body = body[: max_len - 1]
            seqs.append([lead_id] + body)
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return cls(ids, pad_id)


@dataclass
class ProteinBatch:
    """Sequence embeddings right-padded to a common length, with a residue mask."""

    e_seq: Tensor
    mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.e_seq.shape[0]

    @classmethod
    def from_list(cls, items: Sequence[Tensor]) -> "ProteinBatch":
        if not items:
            raise ContractError("empty protein batch")
        n_max = max(t.shape[0] for t in items)
        c = items[0].shape[1]
        data = np.zeros((len(items), n_max, c), dtype=items[0].dtype)
        mask = np.zeros((len(items), n_max), dtype=bool)
        for i, t in enumerate(items):
            data[i, : t.shape[0]] = t.data
            mask[i, : t.shape[0]] = True
        return cls(Tensor(data), mask)

    def take(self, idx) -> "ProteinBatch":
        idx = np.asarray(idx)
        return ProteinBatch(Tensor(self.e_seq.data[idx]), self.mask[idx])


class PlpLayer(Module):
    def __init__(self, rng, cfg: PlpConfig, with_cross: bool, dtype=None):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(rng, d, cfg.n_heads, dtype=dtype)
        self.ln_self = LayerNorm(d, dtype)
        self.with_cross = with_cross
        if with_cross:
            self.cross_attn = MultiHeadAttention(rng, d, cfg.n_heads, d_kv=cfg.c_seq, dtype=dtype)
            self.ln_cross = LayerNorm(d, dtype)
        self.ffn_query = FeedForward(rng, d, d * cfg.ffn_mult, dtype)
        self.ln_ffn_query = LayerNorm(d, dtype)
        self.ffn_text = FeedForward(rng, d, d * cfg.ffn_mult, dtype)
        self.ln_ffn_text = LayerNorm(d, dtype)


def self_attention_block(x: Tensor, mask: np.ndarray | None, layer: PlpLayer) -> Tensor:
    """Shared self-attention over [queries ; text] with residual and layer norm."""
    return layer.ln_self(x + layer.self_attn(x, x, mask))


def cross_attention_block(
    queries: Tensor,
    e_seq: Tensor,
    layer: PlpLayer,
    residue_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Query rows attend into the frozen sequence features (keys/values from e_seq)."""
    squeeze = queries.ndim == 2
    if squeeze:
        queries = T.reshape(queries, (1,) + queries.shape)
        e_seq = T.reshape(e_seq, (1,) + e_seq.shape)
    mask = None if residue_mask is None else residue_mask[:, None, None, :]
    attn, weights = layer.cross_attn(queries, e_seq, mask, return_weights=True)
    out = layer.ln_cross(queries + attn)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return (out, weights) if return_weights else out


class PlpFormer(Module):
    def __init__(self, cfg: PlpConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.query_tokens = normal(rng, (cfg.n_queries, d), 0.02, dtype)
        self.word_emb = normal(rng, (cfg.vocab_size, d), 0.02, dtype)
        self.pos_emb = normal(rng, (cfg.max_text_len, d), 0.02, dtype)
        self.ln_emb = LayerNorm(d, dtype)
        self.layers = [
            PlpLayer(rng, cfg, with_cross=(i % cfg.cross_attention_every == 0), dtype=dtype)
            for i in range(cfg.n_layers)
        ]
        self.ptg_head = Linear(rng, d, cfg.vocab_size, dtype=dtype)
        self.ptm_head = Linear(rng, d, 1, dtype=dtype)

    def embed_text(self, text: TextBatch) -> Tensor:
        L = text.ids.shape[1]
        x = T.take(self.word_emb, text.ids) + T.take(self.pos_emb, slice(0, L))
        return self.ln_emb(x)

    def forward(
        self,
        proteins: ProteinBatch,
        text: TextBatch | None,
        mode: AttentionMaskMode,
    ) -> tuple[Tensor, Tensor | None]:
        """Returns (query_out (B, n_queries, d), text_out (B, L, d) or None)."""
        cfg = self.cfg
        B = proteins.batch_size
        nq = cfg.n_queries
        q = T.add(self.query_tokens, Tensor(np.zeros((B, nq, cfg.d_model), dtype=self.query_tokens.dtype)))
        if text is not None:
            if text.batch_size != B:
                raise ContractError(f"text batch {text.batch_size} != protein batch {B}")
            L = text.ids.shape[1]
            if L > cfg.max_text_len:
                raise ContractError(f"text length {L} exceeds max_text_len {cfg.max_text_len}")
            t = self.embed_text(text)
            key_ok = np.concatenate([np.ones((B, nq), dtype=bool), text.pad_mask], axis=1)
            mask = mode_mask(mode, nq, L)[None, None] & key_ok[:, None, None, :]
        else:
            L = 0
            t = None
            mask = None
        for layer in self.layers:
            h = q if t is None else T.concat([q, t], axis=1)
            h = self_attention_block(h, mask, layer)
            if t is None:
                q = h
            else:
                q, t = h[:, :nq], h[:, nq:]
            if layer.with_cross:
                q = cross_attention_block(q, proteins.e_seq, layer, proteins.mask)
            q = layer.ln_ffn_query(q + layer.ffn_query(q))
            if t is not None:
                t = layer.ln_ffn_text(t + layer.ffn_text(t))
        return q, t

    def select(self, e_seq: Tensor) -> Tensor:
        """Query output for one protein with no text: (n_queries, d)."""
        q, _ = self.forward(ProteinBatch.from_list([e_seq]), None, AttentionMaskMode.UNIMODAL)
        return T.reshape(q, q.shape[1:])


# ---------------------------------------------------------------------------
# objectives


def ptc_similarity(query_out: Tensor, text_cls: Tensor) -> Tensor:
    """s(P_i, T_j) = max over queries of cosine(query, text [CLS]); shape (B_p, B_t)."""
    B, nq, d = query_out.shape
    qn = T.reshape(T.l2_normalize(query_out), (B * nq, d))
    tn = T.l2_normalize(text_cls)
    sims = T.reshape(T.matmul(qn, T.swap_last(tn)), (B, nq, text_cls.shape[0]))
    return T.tmax(sims, axis=1)


def ptc_loss_from_similarity(sim: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix (matches on the diagonal)."""
    B = sim.shape[0]
    if B < 2 or sim.shape[1] != B:
        raise ContractError(f"PTC needs a square similarity matrix with B >= 2, got {sim.shape}")
    logits = sim * (1.0 / temperature)
    target = np.arange(B)
    p2t = T.cross_entropy_logits(logits, target)
    t2p = T.cross_entropy_logits(T.swap_last(logits), target)
    return (p2t + t2p) * 0.5


def ptc_loss(query_out: Tensor, text_cls: Tensor, temperature: float = 0.07) -> Tensor:
    if query_out.shape[0] < 2:
        raise ContractError("PTC needs at least two pairs for in-batch negatives")
    return ptc_loss_from_similarity(ptc_similarity(query_out, text_cls), temperature)


def ptg_loss(model: PlpFormer, proteins: ProteinBatch, text: TextBatch, dec_id: int) -> Tensor:
    """Teacher-forced next-token loss on text that can see every query."""
    if not np.all(text.ids[:, 0] == dec_id):
        raise ContractError("PTG text must begin with the [DEC] token")
    _, t = model.forward(proteins, text, AttentionMaskMode.MULTIMODAL_CAUSAL)
    logits = model.ptg_head(t[:, :-1])
    targets = text.ids[:, 1:].copy()
    targets[~text.pad_mask[:, 1:]] = IGNORE
    return T.cross_entropy_logits(logits, targets, ignore_index=IGNORE)


def mine_hard_negatives(sim: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Most similar non-matching text per protein, and protein per text."""
    s = np.array(sim, dtype=np.float64, copy=True)
    np.fill_diagonal(s, -np.inf)
    return np.argmax(s, axis=1), np.argmax(s, axis=0)


def ptm_logits(model: PlpFormer, proteins: ProteinBatch, text: TextBatch) -> Tensor:
    """Matching logit per pair: binary head on each query output, averaged over queries."""
    q, _ = model.forward(proteins, text, AttentionMaskMode.BIDIRECTIONAL)
    per_query = model.ptm_head(q)
    return T.mean(T.reshape(per_query, per_query.shape[:2]), axis=1)


def ptm_loss(model: PlpFormer, proteins: ProteinBatch, text: TextBatch, sim: np.ndarray) -> Tensor:
    B = proteins.batch_size
    if B < 2:
        raise ContractError("PTM needs at least two pairs to mine negatives")
    neg_text, neg_prot = mine_hard_negatives(sim)
    pidx = np.concatenate([np.arange(B), np.arange(B), neg_prot])
    tidx = np.concatenate([np.arange(B), neg_text, np.arange(B)])
    labels = np.concatenate([np.ones(B), np.zeros(2 * B)])
    logits = ptm_logits(model, proteins.take(pidx), text.take(tidx))
    return T.binary_cross_entropy_logits(logits, labels)


@dataclass
class PretrainBatch:
    proteins: ProteinBatch
    text_cls: TextBatch
    text_dec: TextBatch
    dec_id: int


def pretrain_losses(model: PlpFormer, batch: PretrainBatch) -> dict[str, Tensor]:
    cfg = model.cfg
    q, t = model.forward(batch.proteins, batch.text_cls, AttentionMaskMode.UNIMODAL)
    sim = ptc_similarity(q, t[:, 0])
    ptc = ptc_loss_from_similarity(sim, cfg.ptc_temperature)
    ptg = ptg_loss(model, batch.proteins, batch.text_dec, batch.dec_id)
    ptm = ptm_loss(model, batch.proteins, batch.text_cls, sim.data)
    total = ptc * cfg.w_ptc + ptg * cfg.w_ptg + ptm * cfg.w_ptm
    return {"ptc": ptc, "ptg": ptg, "ptm": ptm, "total": total}


def plp_pretrain_step(model: PlpFormer, batch: PretrainBatch, opt: AdamW) -> dict[str, float]:
    """Joint PTC + PTG + PTM loss, one backward pass, one optimizer update."""
    opt.zero_grad()
    tape = Tape()
    with tape:
        losses = pretrain_losses(model, batch)
    tape.backward(losses["total"])
    lr = opt.step()
    report = {k: v.item() for k, v in losses.items()}
    report["lr"] = lr
    return report
