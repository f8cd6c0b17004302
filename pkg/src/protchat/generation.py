"""Stage 3: soft protein prompts, prompt assembly and a small causal decoder.

Stream layout fed to the decoder::

    <Protein> | 32 align prompts | 32 tertiary prompts | </Protein> | question | answer

The answer region is empty at inference and the loss covers answer tokens only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.checkpoint import decode_tensors, encode_tensors
from .autodiff.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, normal
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape, Tensor
from .corpus.tokenizer import PROTEIN_CLOSE, PROTEIN_OPEN, Tokenizer
from .errors import ContractError

IGNORE = -100


@dataclass
class DecoderConfig:
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 128
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_lm % self.n_heads:
            raise ContractError(f"d_lm {self.d_lm} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class GenerationMode:
    kind: str = "greedy"
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "top_k"):
            raise ContractError(f"unknown generation mode {self.kind!r}")


class AdapterParams(Module):
    """Two independent linear maps into the decoder's embedding width."""

    def __init__(self, d_model: int, d_lm: int, seed: int = 0, dtype=None):
        rng = np.random.default_rng(seed)
        self.fc_align = Linear(rng, d_model, d_lm, dtype=dtype)
        self.fc_ter = Linear(rng, d_model, d_lm, dtype=dtype)


def project_prompts(e_align: Tensor, e_ter_proj: Tensor, adapter: AdapterParams) -> Tensor:
    """Rows [0, nq) come from the aligned embedding, rows [nq, 2nq) from tertiary."""
    return T.concat([adapter.fc_align(e_align), adapter.fc_ter(e_ter_proj)], axis=-2)


class DecoderBlock(Module):
    def __init__(self, rng, cfg: DecoderConfig, dtype=None):
        self.ln_attn = LayerNorm(cfg.d_lm, dtype)
        self.attn = MultiHeadAttention(rng, cfg.d_lm, cfg.n_heads, dtype=dtype)
        self.ln_ffn = LayerNorm(cfg.d_lm, dtype)
        self.ffn = FeedForward(rng, cfg.d_lm, cfg.d_lm * cfg.ffn_mult, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln_ffn(x))


class ToyDecoder(Module):
    """Pre-norm causal transformer over an embedding stream."""

    def __init__(self, cfg: DecoderConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.tok_emb = normal(rng, (cfg.vocab_size, cfg.d_lm), 0.02, dtype)
        self.pos_emb = normal(rng, (cfg.max_seq_len, cfg.d_lm), 0.02, dtype)
        self.blocks = [DecoderBlock(rng, cfg, dtype) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_lm, dtype)
        self.lm_head = Linear(rng, cfg.d_lm, cfg.vocab_size, dtype=dtype)

    def embed(self, ids) -> Tensor:
        return T.take(self.tok_emb, np.asarray(ids, dtype=np.int64))

    def forward(self, stream: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """``stream`` (B, L, d_lm) -> logits (B, L, vocab)."""
        if stream.ndim == 2:
            stream = T.reshape(stream, (1,) + stream.shape)
        B, L, _ = stream.shape
        if L > self.cfg.max_seq_len:
            raise ContractError(f"stream length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = stream + T.take(self.pos_emb, slice(0, L))
        mask = causal_mask(L)[None, None]
        if valid is not None:
            mask = mask & np.asarray(valid, dtype=bool)[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask)
        return self.lm_head(self.ln_f(x))


@dataclass
class PromptSequence:
    protein_prompts: Tensor
    question: list[int]
    answer: list[int] = field(default_factory=list)
    open_id: int = 0
    close_id: int = 0

    @property
    def n_prompts(self) -> int:
        return self.protein_prompts.shape[0]

    @property
    def answer_start(self) -> int:
        return 1 + self.n_prompts + 1 + len(self.question)

    def __len__(self) -> int:
        return self.answer_start + len(self.answer)

    def loss_mask(self) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        m[self.answer_start :] = True
        return m

    def targets(self) -> np.ndarray:
        """Next-token targets per position; only positions predicting answer tokens count."""
        t = np.full(len(self), IGNORE, dtype=np.int64)
        for j, tok in enumerate(self.answer):
            t[self.answer_start + j - 1] = tok
        return t

    def embeddings(self, decoder: ToyDecoder) -> Tensor:
        parts = [
            decoder.embed([self.open_id]),
            self.protein_prompts,
            decoder.embed([self.close_id]),
            decoder.embed(self.question),
        ]
        if self.answer:
            parts.append(decoder.embed(self.answer))
        return T.concat(parts, axis=0)

    def to_bytes(self) -> bytes:
        return encode_tensors(
            {
                "protein_prompts": self.protein_prompts.data,
                "question": np.asarray(self.question, dtype=np.float32),
                "answer": np.asarray(self.answer, dtype=np.float32),
                "special": np.asarray([self.open_id, self.close_id], dtype=np.float32),
            }
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PromptSequence":
        t = decode_tensors(buf)
        return cls(
            Tensor(t["protein_prompts"]),
            [int(x) for x in t["question"]],
            [int(x) for x in t["answer"]],
            int(t["special"][0]),
            int(t["special"][1]),
        )


def assemble_prompt(
    protein_prompts: Tensor,
    question: Sequence[int],
    answer: Sequence[int] | None,
    tok: Tokenizer,
) -> PromptSequence:
    if not question:
        raise ContractError("question must contain at least one token")
    return PromptSequence(
        protein_prompts,
        list(question),
        list(answer or []),
        tok.special(PROTEIN_OPEN),
        tok.special(PROTEIN_CLOSE),
    )


@dataclass
class TuneExample:
    """Frozen protein features plus one tokenised Q&A pair (answer ends with EOS)."""

    protein_id: str
    e_align: Tensor
    e_ter_proj: Tensor
    question: list[int]
    answer: list[int]


def _pad_stack(streams: list[Tensor]) -> tuple[Tensor, np.ndarray]:
    L = max(s.shape[0] for s in streams)
    d = streams[0].shape[1]
    padded, valid = [], np.zeros((len(streams), L), dtype=bool)
    for i, s in enumerate(streams):
        n = s.shape[0]
        valid[i, :n] = True
        if n < L:
            s = T.concat([s, Tensor(np.zeros((L - n, d), dtype=s.dtype))], axis=0)
        padded.append(s)
    return T.stack(padded), valid


def lm_loss(
    examples: Sequence[TuneExample],
    decoder: ToyDecoder,
    adapter: AdapterParams,
    tok: Tokenizer,
) -> Tensor:
    streams, targets = [], []
    for ex in examples:
        if not ex.answer:
            raise ContractError(f"{ex.protein_id}: tuning example without answer tokens")
        prompts = project_prompts(ex.e_align, ex.e_ter_proj, adapter)
        seq = assemble_prompt(prompts, ex.question, ex.answer, tok)
        streams.append(seq.embeddings(decoder))
        targets.append(seq.targets())
    stream, valid = _pad_stack(streams)
    tgt = np.full(valid.shape, IGNORE, dtype=np.int64)
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = t
    logits = decoder.forward(stream, valid)
    return T.cross_entropy_logits(logits, tgt, ignore_index=IGNORE)


def lm_tune_step(
    examples: Sequence[TuneExample],
    decoder: ToyDecoder,
    adapter: AdapterParams,
    opt: AdamW,
    tok: Tokenizer,
) -> dict[str, float]:
    """Answer-masked teacher-forced step. Which of decoder/adapter move is
    decided by ``requires_grad`` on their parameters and ``opt``'s param set."""
    opt.zero_grad()
    tape = Tape()
    with tape:
        loss = lm_loss(examples, decoder, adapter, tok)
    tape.backward(loss)
    lr = opt.step()
    return {"loss": loss.item(), "lr": lr}


@dataclass
class GenerationResult:
    tokens: list[int]
    truncated: bool


def generate(
    prompt: PromptSequence,
    decoder: ToyDecoder,
    mode: GenerationMode = GenerationMode(),
    eos_id: int | None = None,
    max_new_tokens: int | None = None,
) -> GenerationResult:
    """Autoregressive decoding until EOS, ``max_new_tokens`` or the context limit."""
    if prompt.answer:
        raise ContractError("generation prompt must have an empty answer region")
    limit = decoder.cfg.max_seq_len - len(prompt)
    if max_new_tokens is not None:
        limit = min(limit, max_new_tokens)
    if limit < 1:
        raise ContractError("prompt leaves no room for generated tokens")
    rng = np.random.default_rng(mode.seed) if mode.kind == "top_k" else None
    base = prompt.embeddings(decoder)
    out: list[int] = []
    with T.no_record():
        for _ in range(limit):
            stream = base if not out else T.concat([base, decoder.embed(out)], axis=0)
            logits = decoder.forward(stream).data[0, -1].astype(np.float64)
            if mode.kind == "greedy":
                nxt = int(np.argmax(logits))
            else:
                k = min(mode.k, logits.size)
                top = np.argsort(-logits, kind="stable")[:k]
                p = np.exp(logits[top] - logits[top].max())
                nxt = int(top[rng.choice(k, p=p / p.sum())])
            if eos_id is not None and nxt == eos_id:
                return GenerationResult(out, False)
            out.append(nxt)
    return GenerationResult(out, True)


def transcript_line(protein_id: str, question: str, answer: str, truncated: bool) -> str:
    return json.dumps(
        {"protein_id": protein_id, "question": question, "answer": answer, "truncated": truncated},
        ensure_ascii=False,
    )
