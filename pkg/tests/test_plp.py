import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protchat.autodiff import tensor as T
from protchat.autodiff.gradcheck import check_gradients
from protchat.autodiff.optim import AdamW, AdamWState
from protchat.autodiff.tensor import Tape, Tensor, default_dtype
from protchat.errors import ContractError
from protchat.plp import (
    AttentionMaskMode,
    PretrainBatch,
    ProteinBatch,
    TextBatch,
    cross_attention_block,
    mine_hard_negatives,
    plp_pretrain_step,
    ptc_loss,
    ptc_loss_from_similarity,
    ptc_similarity,
    ptg_loss,
    ptm_logits,
    ptm_loss,
    self_attention_block,
)
from protchat.toydata import make_records
from protchat.corpus import build_tokenizer
from protchat.corpus.tokenizer import CLS as CLS_TOKEN, DEC as DEC_TOKEN

from helpers import CLS, DEC, PAD, VOCAB, mask_violations, random_inputs, tiny_plp

MODES = list(AttentionMaskMode)


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


# --- attention blocks ----------------------------------------------------------


def test_zero_value_projection_leaves_normalized_residual(rng):
    model = tiny_plp(0, n_heads=1)
    layer = model.layers[0]
    for lin in (layer.self_attn.v, layer.self_attn.o):
        lin.bias.data[:] = 0
    layer.self_attn.v.weight.data[:] = 0
    x = rng.normal(size=(1, 6, 8))
    out = self_attention_block(Tensor(x), np.ones((6, 6), dtype=bool), layer)
    np.testing.assert_allclose(out.data, _ln(x), atol=1e-5)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(3))
def test_mask_soundness_by_perturbation(mode, seed):
    assert mask_violations(mode, seed) == 0


def test_causal_mode_perturbation_leaves_earlier_rows(rng):
    model = tiny_plp(1)
    proteins, text = random_inputs(rng, B=1, L=6)
    q0, t0 = model.forward(proteins, text, AttentionMaskMode.MULTIMODAL_CAUSAL)
    ids = text.ids.copy()
    ids[0, 4] = 3 if ids[0, 4] != 3 else 4
    q1, t1 = model.forward(proteins, TextBatch(ids, PAD), AttentionMaskMode.MULTIMODAL_CAUSAL)
    assert np.array_equal(q0.data, q1.data)
    assert np.array_equal(t0.data[:, :4], t1.data[:, :4])
    assert not np.array_equal(t0.data[:, 4:], t1.data[:, 4:])


def test_unimodal_queries_ignore_text(rng):
    model = tiny_plp(2)
    proteins, text = random_inputs(rng, B=2, L=5)
    other = TextBatch(np.where(text.ids == CLS, CLS, (text.ids + 5) % (VOCAB - 3) + 3), PAD)
    qa, _ = model.forward(proteins, text, AttentionMaskMode.UNIMODAL)
    qb, _ = model.forward(proteins, other, AttentionMaskMode.UNIMODAL)
    assert np.array_equal(qa.data, qb.data)


def test_bidirectional_swapping_text_changes_queries(rng):
    model = tiny_plp(3)
    proteins, text = random_inputs(rng, B=1, L=6)
    ids = text.ids.copy()
    ids[0, 2], ids[0, 3] = 5, 9
    swapped = ids.copy()
    swapped[0, 2], swapped[0, 3] = 9, 5
    qa, _ = model.forward(proteins, TextBatch(ids, PAD), AttentionMaskMode.BIDIRECTIONAL)
    qb, _ = model.forward(proteins, TextBatch(swapped, PAD), AttentionMaskMode.BIDIRECTIONAL)
    assert not np.array_equal(qa.data, qb.data)


def test_cross_attention_single_residue_weight_is_one(rng):
    model = tiny_plp(0)
    q = Tensor(rng.normal(size=(3, 8)))
    out, w = cross_attention_block(q, Tensor(rng.normal(size=(1, 5))), model.layers[0], return_weights=True)
    assert out.shape == (3, 8)
    assert np.all(w.data == 1.0)


def test_padded_residues_do_not_leak(rng):
    model = tiny_plp(4)
    e = rng.normal(size=(3, 5))
    alone = ProteinBatch.from_list([Tensor(e)])
    padded = ProteinBatch.from_list([Tensor(e), Tensor(rng.normal(size=(7, 5)))])
    qa, _ = model.forward(alone, None, AttentionMaskMode.UNIMODAL)
    qb, _ = model.forward(padded, None, AttentionMaskMode.UNIMODAL)
    np.testing.assert_allclose(qa.data[0], qb.data[0], atol=1e-12)


@pytest.mark.parametrize("n", [1, 7, 100, 3000])
def test_query_count_is_length_independent(n, rng):
    model = tiny_plp(0, dtype=np.float32)
    proteins = ProteinBatch.from_list([Tensor(rng.normal(size=(n, 5)).astype(np.float32))])
    q, _ = model.forward(proteins, TextBatch(np.array([[CLS, 4, 5]]), PAD), AttentionMaskMode.UNIMODAL)
    assert q.shape == (1, 3, 8)
    assert model.select(proteins.e_seq[0]).shape == (3, 8) if n == 1 else True


def test_query_out_full_width(rng):
    model = tiny_plp(0, n_queries=32, d_model=16, dtype=np.float32)
    proteins = ProteinBatch.from_list([Tensor(rng.normal(size=(100, 5)).astype(np.float32))] * 2)
    q, t = model.forward(proteins, TextBatch(np.full((2, 4), CLS), PAD), AttentionMaskMode.UNIMODAL)
    assert q.shape == (2, 32, 16) and t.shape == (2, 4, 16)


def test_text_too_long_and_batch_mismatch(rng):
    model = tiny_plp(0)
    proteins, _ = random_inputs(rng, B=1)
    with pytest.raises(ContractError):
        model.forward(proteins, TextBatch(np.full((1, 9), CLS), PAD), AttentionMaskMode.UNIMODAL)
    with pytest.raises(ContractError):
        model.forward(proteins, TextBatch(np.full((2, 3), CLS), PAD), AttentionMaskMode.UNIMODAL)


# --- PTC -------------------------------------------------------------------------


def test_ptc_orthogonal_pairs():
    tau = 0.07
    loss = ptc_loss_from_similarity(Tensor(np.eye(2)), tau).item()
    assert loss == pytest.approx(math.log1p(math.exp(-1 / tau)), rel=1e-9)
    assert loss == pytest.approx(6.2e-7, rel=0.01)


@pytest.mark.parametrize("B", [2, 3, 8])
def test_ptc_all_equal_is_log_b(B):
    assert ptc_loss_from_similarity(Tensor(np.full((B, B), 0.3)), 0.07).item() == pytest.approx(math.log(B), abs=1e-9)


def test_ptc_needs_two_pairs(rng):
    with pytest.raises(ContractError):
        ptc_loss(Tensor(rng.normal(size=(1, 3, 4))), Tensor(rng.normal(size=(1, 4))))


def test_ptc_max_idempotence(rng):
    q = rng.normal(size=(2, 3, 4))
    t = rng.normal(size=(2, 4))
    sim = ptc_similarity(Tensor(q), Tensor(t)).data
    best = np.argmax(np.einsum("bqd,d->bq", q / np.linalg.norm(q, axis=-1, keepdims=True), t[0]), axis=1)
    dup = np.concatenate([q, q[np.arange(2), best][:, None]], axis=1)
    assert np.allclose(ptc_similarity(Tensor(dup), Tensor(t)).data[:, 0], sim[:, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 2**31))
def test_ptc_similarity_scale_invariant(a, b, seed):
    r = np.random.default_rng(seed)
    q, t = r.normal(size=(3, 2, 4)), r.normal(size=(3, 4))
    base = ptc_similarity(Tensor(q), Tensor(t)).data
    np.testing.assert_allclose(ptc_similarity(Tensor(a * q), Tensor(b * t)).data, base, atol=1e-9)


# --- PTG -------------------------------------------------------------------------


def test_ptg_zero_head_is_log_vocab(rng):
    model = tiny_plp(0)
    model.ptg_head.weight.data[:] = 0
    model.ptg_head.bias.data[:] = 0
    proteins, text = random_inputs(rng, B=2, L=5, lead=DEC, pad_last=True)
    assert ptg_loss(model, proteins, text, DEC).item() == pytest.approx(math.log(VOCAB), abs=1e-9)


def test_ptg_requires_dec(rng):
    model = tiny_plp(0)
    proteins, text = random_inputs(rng, B=2, L=4, lead=CLS)
    with pytest.raises(ContractError):
        ptg_loss(model, proteins, text, DEC)


def test_ptg_gradient_wrt_cross_attention_query_projection(rng):
    with default_dtype(np.float64):
        model = tiny_plp(5)
        proteins, text = random_inputs(rng, B=2, L=5, lead=DEC)
        w = model.layers[0].cross_attn.q.weight
        (err,) = check_gradients(lambda: ptg_loss(model, proteins, text, DEC), [w], h=1e-4)
    assert err < 1e-3


def _ptg_toy_setup(n_pairs, seed=0):
    recs = make_records(n_pairs, seed=seed)
    tok = build_tokenizer([r.description for r in recs])
    from protchat.encoders import EncoderSpec, encode_stub

    spec = EncoderSpec("stub", seed=seed, c_seq=16, c_ter=8)
    proteins = ProteinBatch.from_list([encode_stub(r.sequence, spec).e_seq for r in recs])
    rows = [tok.encode(r.description) for r in recs]
    dec = TextBatch.from_token_lists(rows, tok.special(DEC_TOKEN), tok.pad_id, 24, tok.eos_id)
    cls_ = TextBatch.from_token_lists(rows, tok.special(CLS_TOKEN), tok.pad_id, 24, tok.eos_id)
    return tok, proteins, dec, cls_


def test_ptg_four_pairs_fit_within_500_steps():
    tok, proteins, dec, _ = _ptg_toy_setup(4)
    model = tiny_plp(0, n_queries=8, d_model=32, n_heads=4, vocab_size=len(tok), max_text_len=24, c_seq=16, dtype=np.float32)
    opt = AdamW(dict(model.named_parameters()), AdamWState(peak_lr=1e-3, min_lr=1e-4, warmup=20), 500)
    for _ in range(500):
        opt.zero_grad()
        tape = Tape()
        with tape:
            loss = ptg_loss(model, proteins, dec, tok.special(DEC_TOKEN))
        tape.backward(loss)
        opt.step()
    with T.no_record():
        final = ptg_loss(model, proteins, dec, tok.special(DEC_TOKEN)).item()
    assert final < 0.1


# --- PTM -------------------------------------------------------------------------


def test_hard_negative_example():
    neg_text, neg_prot = mine_hard_negatives(np.array([[0.9, 0.1, 0.8], [0.2, 0.9, 0.1], [0.1, 0.3, 0.9]]))
    assert neg_text[0] == 2
    assert list(neg_text) == [2, 0, 1]
    assert list(neg_prot) == [1, 2, 0]


def test_ptm_zero_head_is_log_two(rng):
    model = tiny_plp(0)
    model.ptm_head.weight.data[:] = 0
    model.ptm_head.bias.data[:] = 0
    proteins, text = random_inputs(rng, B=3, L=4)
    assert ptm_loss(model, proteins, text, rng.random((3, 3))).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ptm_needs_two_pairs(rng):
    model = tiny_plp(0)
    proteins, text = random_inputs(rng, B=1, L=4)
    with pytest.raises(ContractError):
        ptm_loss(model, proteins, text, np.ones((1, 1)))


def test_ptm_score_is_permutation_invariant_over_queries(rng):
    model = tiny_plp(6)
    q = Tensor(rng.normal(size=(2, 3, 8)))
    perm = Tensor(q.data[:, [2, 0, 1]])
    score = lambda x: T.mean(T.reshape(model.ptm_head(x), (2, 3)), axis=1).data
    np.testing.assert_allclose(score(q), score(perm), atol=1e-12)
    proteins, text = random_inputs(rng, B=2, L=4)
    assert ptm_logits(model, proteins, text).shape == (2,)


# --- joint step --------------------------------------------------------------------


def _batch(rng):
    proteins, cls_ = random_inputs(rng, B=3, L=5, pad_last=True)
    dec_ids = cls_.ids.copy()
    dec_ids[:, 0] = DEC
    return PretrainBatch(proteins, cls_, TextBatch(dec_ids, PAD), DEC)


def test_losses_non_negative_and_weight_identity(rng):
    batch = _batch(rng)
    model = tiny_plp(7, w_ptg=0.0, w_ptm=0.0)
    opt = AdamW(dict(model.named_parameters()), AdamWState(), 10)
    rep = plp_pretrain_step(model, batch, opt)
    assert rep["total"] == rep["ptc"]
    assert min(rep["ptc"], rep["ptg"], rep["ptm"]) >= 0


def test_pretrain_step_determinism(rng):
    batch = _batch(rng)

    def run():
        model = tiny_plp(8, dtype=np.float32)
        opt = AdamW(dict(model.named_parameters()), AdamWState(warmup=1), 5)
        return [plp_pretrain_step(model, batch, opt) for _ in range(3)], model.fingerprint()

    assert run() == run()


@pytest.mark.slow
def test_pretrain_trend_on_32_pairs(tmp_path):
    from conftest import write_toy_run
    from protchat.config import load_config
    from protchat.pipeline import cmd_pretrain

    path = write_toy_run(
        tmp_path,
        n=32,
        plp={"d_model": 16, "n_layers": 1, "n_queries": 4, "max_text_len": 16},
        encoder={"c_seq": 16, "c_ter": 8},
        pretrain={"steps": 2000, "batch_size": 8, "warmup": 100, "peak_lr": 1e-3, "min_lr": 1e-4, "checkpoint_every": 1000},
    )
    cfg = load_config(path)
    cmd_pretrain(cfg)
    rows = np.loadtxt(cfg.out / "plp_loss.tsv")
    total = rows[:, -1]
    assert total[-100:].mean() < total[:100].mean()
