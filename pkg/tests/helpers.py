"""Oracles shared by the module tests and the acceptance suite."""

from __future__ import annotations

import itertools

import numpy as np

from protchat.alignment import (
    AlignmentModel,
    contrastive_loss,
    pcg_forward,
    project_tertiary,
)
from protchat.autodiff import tensor as T
from protchat.autodiff.gradcheck import check_gradients
from protchat.autodiff.tensor import Tensor, default_dtype
from protchat.corpus import build_tokenizer
from protchat.generation import AdapterParams, DecoderConfig, ToyDecoder, TuneExample, lm_loss
from protchat.plp import (
    AttentionMaskMode,
    PlpConfig,
    PlpFormer,
    ProteinBatch,
    TextBatch,
    mode_mask,
    ptc_loss,
    ptg_loss,
    ptm_loss,
    ptc_similarity,
)

VOCAB = 20
PAD, CLS, DEC = 0, 1, 2


def tiny_plp(seed: int = 0, dtype=np.float64, **kw) -> PlpFormer:
    cfg = dict(n_queries=3, d_model=8, n_heads=2, n_layers=2, ffn_mult=2, vocab_size=VOCAB, max_text_len=8, c_seq=5)
    cfg.update(kw)
    return PlpFormer(PlpConfig(**cfg), seed=seed, dtype=dtype)


def random_inputs(rng, B: int = 2, L: int = 5, lead: int = CLS, c_seq: int = 5, pad_last: bool = False):
    lengths = rng.integers(1, 7, size=B)
    proteins = ProteinBatch.from_list([Tensor(rng.normal(size=(int(n), c_seq))) for n in lengths])
    ids = rng.integers(3, VOCAB, size=(B, L))
    ids[:, 0] = lead
    if pad_last:
        ids[0, -1] = PAD
    return proteins, TextBatch(ids, PAD)


def mask_violations(mode: AttentionMaskMode, seed: int) -> int:
    """Perturb every input position in turn; count (out i, in j) pairs the
    mask forbids where output row i moved at all (bit-level comparison)."""
    rng = np.random.default_rng(seed)
    model = tiny_plp(seed)
    nq = model.cfg.n_queries
    proteins, text = random_inputs(rng, B=1, L=5)
    L = text.ids.shape[1]
    allowed = mode_mask(mode, nq, L)
    with T.no_record():
        q0, t0 = model.forward(proteins, text, mode)
    base = np.concatenate([q0.data, t0.data], axis=1)[0]
    violations = 0
    for j in range(nq + L):
        if j < nq:
            saved = model.query_tokens.data.copy()
            model.query_tokens.data[j] += rng.normal(size=model.cfg.d_model)
            q1, t1 = model.forward(proteins, text, mode)
            model.query_tokens.data = saved
        else:
            ids = text.ids.copy()
            ids[0, j - nq] = 3 + (ids[0, j - nq] - 3 + 1) % (VOCAB - 3)
            q1, t1 = model.forward(proteins, TextBatch(ids, PAD), mode)
        out = np.concatenate([q1.data, t1.data], axis=1)[0]
        changed = np.any(out != base, axis=1)
        violations += int(np.sum(changed & ~allowed[:, j]))
    return violations


def decoder_causality_violations(seed: int, L: int = 7) -> int:
    rng = np.random.default_rng(seed)
    dec = ToyDecoder(DecoderConfig(d_lm=8, n_layers=2, n_heads=2, vocab_size=VOCAB, max_seq_len=16, ffn_mult=2), seed=seed, dtype=np.float64)
    stream = rng.normal(size=(L, 8))
    with T.no_record():
        base = dec.forward(Tensor(stream)).data[0]
    violations = 0
    for j in range(L):
        s = stream.copy()
        s[j] += rng.normal(size=8)
        out = dec.forward(Tensor(s)).data[0]
        changed = np.any(out != base, axis=1)
        violations += int(np.sum(changed[:j]))
    return violations


# --- per-op gradient table (f64 inputs of shape 3x4) ----------------------------

_MASK = np.array([[True, False, True, True], [False, True, True, False], [True, True, True, True]])

OPS = {
    "add_broadcast": lambda a, b: T.tsum(T.add(a, b[0])),
    "sub": lambda a, b: T.tsum(T.sub(a, b) * a),
    "mul": lambda a, b: T.tsum(a * b),
    "div": lambda a, b: T.tsum(a / (T.exp(b) + 1.0)),
    "power": lambda a, b: T.tsum(T.power(T.exp(a), 1.5)),
    "exp_log": lambda a, b: T.tsum(T.log(T.exp(a) + T.exp(b))),
    "sqrt": lambda a, b: T.tsum(T.sqrt(a * a + 1.0)),
    "tanh": lambda a, b: T.tsum(T.tanh(a) * b),
    "sigmoid": lambda a, b: T.tsum(T.sigmoid(a) * b),
    "softplus": lambda a, b: T.tsum(T.softplus(a) * b),
    "gelu": lambda a, b: T.tsum(T.gelu(a) * b),
    "relu": lambda a, b: T.tsum(T.relu(a + 0.05) * b),
    "matmul": lambda a, b: T.tsum(T.matmul(a, T.swap_last(b))),
    "reshape_transpose": lambda a, b: T.tsum(T.transpose(T.reshape(a, (4, 3))) * T.reshape(b, (3, 4))),
    "take": lambda a, b: T.tsum(T.take(a, np.array([0, 2, 2])) * b[:3]),
    "concat_stack": lambda a, b: T.tsum(T.stack([a, b]) * T.concat([a, b], axis=0).reshape(2, 3, 4)),
    "broadcast_to": lambda a, b: T.tsum(T.broadcast_to(a[0:1], (3, 4)) * b),
    "mean": lambda a, b: T.mean(a * b, axis=1).sum(),
    "tmax": lambda a, b: T.tsum(T.tmax(a * b, axis=1)),
    "softmax": lambda a, b: T.tsum(T.softmax_rows(a) * b),
    "softmax_masked": lambda a, b: T.tsum(T.softmax(a, mask=_MASK) * b),
    "log_softmax_masked": lambda a, b: T.tsum(T.log_softmax(a, mask=_MASK) * b),
    "layer_norm": lambda a, b: T.tsum(T.layer_norm(a, b[0], b[1]) * b),
    "cross_entropy": lambda a, b: T.cross_entropy_logits(a * b, [1, 3, -100], ignore_index=-100),
    "bce": lambda a, b: T.binary_cross_entropy_logits(T.tsum(a * b, axis=1), [1.0, 0.0, 1.0]),
    "l2_normalize": lambda a, b: T.tsum(T.l2_normalize(a) * b),
    "where_const": lambda a, b: T.tsum(T.where_const(_MASK, a, -1.0) * b),
}


# --- independent metric oracles -------------------------------------------------------------


def lcs_exhaustive(a, b):
    """Longest subsequence of ``a`` (by enumeration) that is also a subsequence of ``b``."""

    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for size in range(len(a), -1, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subseq([a[i] for i in idx], b):
                return size
    return 0


def clipped_brute(cand, refs, n):
    grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
    total = 0
    for g in set(grams):
        in_cand = sum(1 for x in grams if x == g)
        in_ref = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i : i + n]) == g) for r in refs)
        total += min(in_cand, in_ref)
    return total, len(grams)


def meteor_alignment_brute(cand, ref):
    """All one-to-one exact matchings; most matches first, then fewest chunks."""
    pairs = [(i, j) for i in range(len(cand)) for j in range(len(ref)) if cand[i] == ref[j]]
    best = (0, 0)
    for size in range(len(pairs), 0, -1):
        found = []
        for sub in itertools.combinations(pairs, size):
            if len({i for i, _ in sub}) == size and len({j for _, j in sub}) == size:
                s = sorted(sub)
                chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(s, s[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
                found.append(chunks)
        if found:
            return size, min(found)
    return best


def cider_spreadsheet(corpus, N=4):
    """Dense TF-IDF table per order over every n-gram seen anywhere."""
    D = len(corpus)
    per_doc = np.zeros(D)
    for n in range(1, N + 1):
        def grams(toks):
            return [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]

        vocab = sorted({g for c, refs in corpus for t in [c, *refs] for g in grams(t)})
        col = {g: k for k, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for _, refs in corpus:
            seen = {g for r in refs for g in grams(r)}
            for g in seen:
                df[col[g]] += 1
        idf = np.log(D / (1.0 + df))

        def vec(toks):
            v = np.zeros(len(vocab))
            gs = grams(toks)
            for g in gs:
                v[col[g]] += 1.0 / len(gs)
            return v * idf

        for d, (c, refs) in enumerate(corpus):
            vc = vec(c)
            sims = []
            for r in refs:
                vr = vec(r)
                denom = np.linalg.norm(vc) * np.linalg.norm(vr)
                sims.append(0.0 if denom == 0 else float(vc @ vr / denom))
            per_doc[d] += np.mean(sims) / N
    return per_doc


# --- composite-loss gradient checks (f64) -------------------------------------


def _check(fn, params, rng, max_entries=6) -> float:
    return max(check_gradients(fn, params, h=1e-4, max_entries=max_entries, rng=rng))


def plp_loss_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = tiny_plp(seed)
        params = model.parameters()
        proteins, text = random_inputs(rng, B=3, L=5, pad_last=True)
        dec_ids = text.ids.copy()
        dec_ids[:, 0] = DEC
        dec = TextBatch(dec_ids, PAD)
        with T.no_record():
            q, t = model.forward(proteins, text, AttentionMaskMode.UNIMODAL)
            sim = ptc_similarity(q, t[:, 0]).data

        def ptc():
            q, t = model.forward(proteins, text, AttentionMaskMode.UNIMODAL)
            return ptc_loss(q, t[:, 0], 0.5)

        out = {
            "ptc": _check(ptc, params, rng),
            "ptg": _check(lambda: ptg_loss(model, proteins, dec, DEC), params, rng),
            "ptm": _check(lambda: ptm_loss(model, proteins, text, sim), params, rng),
        }
    return out


def alignment_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = AlignmentModel(d_model=6, c_ter=5, n_queries=4, seed=seed)
        sel = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        sec = Tensor(rng.random(size=(9, 8)), requires_grad=True)
        ters = [Tensor(rng.normal(size=(int(n), 5))) for n in (9, 4, 12)]
        w = Tensor(rng.normal(size=(4, 6)))

        def gated():
            return T.tsum(pcg_forward(sel, sec, model.pcg) * w)

        def contrastive():
            e_align = pcg_forward(sel, sec, model.pcg)
            proj = [project_tertiary(t, model.projector) for t in ters]
            return contrastive_loss(e_align, proj[0], proj[1:], tau=0.8)

        return {
            "pcg": _check(gated, [sel, sec] + model.pcg.parameters(), rng),
            "contrastive": _check(contrastive, [sel, sec] + model.parameters(), rng),
        }


def lm_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    tok = build_tokenizer(["what is this ?", "a kinase", "a ligase enzyme"])
    V = len(tok)
    with default_dtype(np.float64):
        dec = ToyDecoder(DecoderConfig(d_lm=8, n_layers=1, n_heads=2, vocab_size=V, max_seq_len=24, ffn_mult=2), seed=seed)
        adapter = AdapterParams(6, 8, seed=seed)
        exs = [
            TuneExample("a", Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6))), tok.encode("what is this ?"), tok.encode("a kinase") + [tok.eos_id]),
            TuneExample("b", Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6))), tok.encode("what ?"), tok.encode("a ligase enzyme") + [tok.eos_id]),
        ]
        return {"lm": _check(lambda: lm_loss(exs, dec, adapter, tok), adapter.parameters() + dec.parameters(), rng)}


# --- seeded desk runs shared with the acceptance suite -------------------------


def stage2_run(directory, n: int = 32, align_steps: int = 1000, seed: int = 0, batch_size: int = 32, peak_lr: float = 3e-3) -> dict:
    """Pretrain briefly, align for ``align_steps``, return cross-level retrieval."""
    from conftest import write_toy_run
    from protchat.config import load_config
    from protchat.pipeline import EmbeddingSource, _cross_level, cmd_align, cmd_pretrain, load_corpus, load_models

    path = write_toy_run(
        directory,
        n=n,
        seed=seed,
        pretrain={"steps": 20, "checkpoint_every": 20},
        align_train={"steps": align_steps, "batch_size": batch_size, "peak_lr": peak_lr, "warmup": 20, "checkpoint_every": align_steps},
    )
    cfg = load_config(path)
    cmd_pretrain(cfg)
    summary = cmd_align(cfg)
    models = load_models(cfg, upto="align")
    corpus = load_corpus(cfg)
    res = _cross_level(models, corpus.train, EmbeddingSource(cfg, corpus.base))
    res["summary"] = summary
    res["config"] = cfg
    return res


def stage3_run(directory, n: int = 8, tune_steps: int = 300, seed: int = 0) -> dict:
    """Full three-stage toy run with the decoder unfrozen, then eval on train."""
    from conftest import write_toy_run
    from protchat.config import load_config
    from protchat.pipeline import cmd_align, cmd_eval, cmd_pretrain, cmd_tune

    path = write_toy_run(
        directory,
        n=n,
        seed=seed,
        tune={"steps": tune_steps, "checkpoint_every": tune_steps, "warmup": 10, "peak_lr": 1e-3},
    )
    cfg = load_config(path)
    cmd_pretrain(cfg)
    cmd_align(cfg)
    cmd_tune(cfg)
    return {"report": cmd_eval(cfg, "train"), "config": cfg}
