"""Stage-2 alignment: secondary-structure gating of the selected sequence
embedding and contrastive alignment against projected tertiary features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import Linear, Module, normal, zeros
from .autodiff.optim import AdamW
from .autodiff.tensor import Tape, Tensor
from .encoders import C_SEC
from .errors import ContractError

TAU = 0.8
K_NEGATIVES = 128
KERNEL = 5


def adaptive_pool_matrix(n: int, out: int, dtype=np.float32) -> np.ndarray:
    """(out, n) averaging matrix; bin i covers [floor(i*n/out), ceil((i+1)*n/out))."""
    if n < 1:
        raise ContractError("adaptive pooling needs at least one row")
    P = np.zeros((out, n), dtype=dtype)
    for i in range(out):
        lo = (i * n) // out
        hi = -(-((i + 1) * n) // out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution along the residue axis with zero 'same' padding.

    ``x`` is (..., n, C_in), ``weight`` is (k, C_in, C_out).
    """
    k, c_in, c_out = weight.shape
    r = k // 2
    n = x.shape[-2]
    pad = np.zeros(x.shape[:-2] + (r, c_in), dtype=x.dtype)
    xp = T.concat([Tensor(pad), x, Tensor(pad)], axis=-2)
    cols = T.concat([xp[..., i : i + n, :] for i in range(k)], axis=-1)
    return T.matmul(cols, T.reshape(weight, (k * c_in, c_out))) + bias


class _LengthProjector(Module):
    """Convolution then adaptive average pooling, mapping n rows to a fixed count."""

    def __init__(self, rng, channels: int, out_rows: int, kernel: int = KERNEL, dtype=None):
        self.out_rows = out_rows
        self.conv_weight = normal(rng, (kernel, channels, channels), (kernel * channels) ** -0.5, dtype)
        self.conv_bias = zeros((channels,), dtype)

    def __call__(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        """``x`` is (n, C) or right-padded (B, n_max, C) with true ``lengths``."""
        y = conv1d_same(x, self.conv_weight, self.conv_bias)
        if x.ndim == 2:
            return T.matmul(Tensor(adaptive_pool_matrix(x.shape[0], self.out_rows, x.dtype)), y)
        n_max = x.shape[1]
        P = np.zeros((x.shape[0], self.out_rows, n_max), dtype=x.dtype)
        for i, n in enumerate(lengths):
            P[i, :, :n] = adaptive_pool_matrix(n, self.out_rows, x.dtype)
        return T.matmul(Tensor(P), y)


class PcgParams(Module):
    def __init__(self, rng, d_model: int, n_queries: int = 32, kernel: int = KERNEL, dtype=None):
        self.length_projector = _LengthProjector(rng, C_SEC, n_queries, kernel, dtype)
        self.w_sec = normal(rng, (C_SEC, d_model), C_SEC**-0.5, dtype)
        self.b = zeros((1, d_model), dtype)


class TertiaryProjector(Module):
    def __init__(self, rng, c_ter: int, d_model: int, n_queries: int = 32, kernel: int = KERNEL, dtype=None):
        self.length_projector = _LengthProjector(rng, c_ter, n_queries, kernel, dtype)
        self.linear = Linear(rng, c_ter, d_model, dtype=dtype)


def pcg_gate(e_sec: Tensor, params: PcgParams, lengths=None) -> Tensor:
    if e_sec.shape[-2] == 0:
        raise ContractError("secondary-structure embedding has no residues")
    projected = params.length_projector(e_sec, lengths)
    return T.sigmoid(T.matmul(projected, params.w_sec) + params.b)


def pcg_forward(e_seq_sel: Tensor, e_sec: Tensor, params: PcgParams, lengths=None) -> Tensor:
    """E_align = sigmoid(project(E_sec) W_sec + b) * E_seq_sel, elementwise."""
    return pcg_gate(e_sec, params, lengths) * e_seq_sel


def project_tertiary(e_ter: Tensor, proj: TertiaryProjector, lengths=None) -> Tensor:
    if e_ter.shape[-2] == 0:
        raise ContractError("tertiary embedding has no residues")
    return proj.linear(proj.length_projector(e_ter, lengths))


def pooled_unit(x: Tensor) -> Tensor:
    """Mean over the query rows, then L2-normalised: (..., nq, d) -> (..., d)."""
    return T.l2_normalize(T.mean(x, axis=-2))


def contrastive_loss_from_scores(s_pos, s_neg, tau: float = TAU) -> Tensor:
    s_pos = T.as_tensor(s_pos)
    s_neg = T.as_tensor(s_neg, like=s_pos)
    if s_neg.size == 0:
        raise ContractError("contrastive loss needs at least one negative")
    logits = T.concat([T.reshape(s_pos, (1,)), T.reshape(s_neg, (-1,))]) * (1.0 / tau)
    return -T.log_softmax(logits)[0]


def contrastive_loss(
    e_align: Tensor, e_ter_pos: Tensor, negatives: Sequence[Tensor], tau: float = TAU
) -> Tensor:
    """-log softmax over [positive, negatives] of pooled-unit dot products / tau."""
    if not negatives:
        raise ContractError("contrastive loss needs at least one negative")
    a = pooled_unit(e_align)
    cands = T.stack([pooled_unit(e_ter_pos)] + [pooled_unit(n) for n in negatives])
    scores = T.matmul(cands, T.reshape(a, (-1, 1)))
    return -T.log_softmax(T.reshape(scores, (-1,)) * (1.0 / tau))[0]


class AlignmentModel(Module):
    def __init__(self, d_model: int, c_ter: int, n_queries: int = 32, seed: int = 0, kernel: int = KERNEL, dtype=None):
        rng = np.random.default_rng(seed)
        self.pcg = PcgParams(rng, d_model, n_queries, kernel, dtype)
        self.projector = TertiaryProjector(rng, c_ter, d_model, n_queries, kernel, dtype)


@dataclass
class AlignBatch:
    """Frozen stage-2 inputs, right-padded along the residue axis."""

    e_seq_sel: Tensor  # (B, nq, d)
    e_sec: Tensor  # (B, n_max, 8)
    e_ter: Tensor  # (B, n_max, c_ter)
    lengths: list[int]

    @property
    def batch_size(self) -> int:
        return self.e_seq_sel.shape[0]

    @classmethod
    def from_items(cls, items: Sequence[tuple[Tensor, Tensor, Tensor]]) -> "AlignBatch":
        sel = np.stack([np.asarray(s.data) for s, _, _ in items])
        lengths = [int(sec.shape[0]) for _, sec, _ in items]
        n_max = max(lengths)
        dtype = sel.dtype
        sec = np.zeros((len(items), n_max, C_SEC), dtype=dtype)
        ter = np.zeros((len(items), n_max, items[0][2].shape[1]), dtype=dtype)
        for i, (_, s, t) in enumerate(items):
            sec[i, : lengths[i]] = s.data
            ter[i, : lengths[i]] = t.data
        return cls(Tensor(sel), Tensor(sec), Tensor(ter), lengths)

    def take(self, idx) -> "AlignBatch":
        idx = np.asarray(idx)
        lengths = [self.lengths[i] for i in idx]
        n_max = max(lengths)
        return AlignBatch(
            Tensor(self.e_seq_sel.data[idx]),
            Tensor(self.e_sec.data[idx, :n_max]),
            Tensor(self.e_ter.data[idx, :n_max]),
            lengths,
        )


def negative_mask(B: int, k: int) -> np.ndarray:
    """Row i allows its positive (i) and the first ``k`` other batch members."""
    allowed = np.eye(B, dtype=bool)
    for i in range(B):
        others = [j for j in range(B) if j != i][:k]
        allowed[i, others] = True
    return allowed


def align_scores(model: AlignmentModel, batch: AlignBatch) -> Tensor:
    """(B, B) matrix: row i = E_align_i against every projected E_ter_j."""
    a = pooled_unit(pcg_forward(batch.e_seq_sel, batch.e_sec, model.pcg, batch.lengths))
    t = pooled_unit(project_tertiary(batch.e_ter, model.projector, batch.lengths))
    return T.matmul(a, T.swap_last(t))


def align_loss(model: AlignmentModel, batch: AlignBatch, k: int = K_NEGATIVES, tau: float = TAU) -> Tensor:
    B = batch.batch_size
    if B < 2:
        raise ContractError("alignment needs at least one in-batch negative (batch >= 2)")
    scores = align_scores(model, batch)
    logp = T.log_softmax(scores * (1.0 / tau), axis=-1, mask=negative_mask(B, k))
    diag = logp[np.arange(B), np.arange(B)]
    return -T.mean(diag)


def align_train_step(
    model: AlignmentModel, batch: AlignBatch, opt: AdamW, k: int = K_NEGATIVES, tau: float = TAU
) -> dict[str, float]:
    """One AdamW step on the gating and tertiary-projection parameters only."""
    opt.zero_grad()
    tape = Tape()
    with tape:
        loss = align_loss(model, batch, k, tau)
    tape.backward(loss)
    lr = opt.step()
    return {"loss": loss.item(), "lr": lr, "negatives": min(k, batch.batch_size - 1)}


def cross_level_rankings(model: AlignmentModel, batch: AlignBatch) -> np.ndarray:
    """For each E_align, gallery indices sorted by cosine to projected E_ter (best first)."""
    scores = align_scores(model, batch).data
    return np.argsort(-scores, axis=1, kind="stable")
