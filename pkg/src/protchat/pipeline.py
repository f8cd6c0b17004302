"""Stage runners behind the CLI: pretrain, align, tune, eval and chat inference.

Every run directory holds::

    tokenizer.json  split.json
    plp.ckpt    plp_loss.tsv       stage 1
    align.ckpt  align_loss.tsv     stage 2
    tune.ckpt   tune_loss.tsv      stage 3
    eval/report.json  eval/metrics.tsv  eval/transcripts.jsonl  eval/figures/*.png
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .alignment import AlignBatch, AlignmentModel, align_train_step, cross_level_rankings, pcg_forward, project_tertiary
from .autodiff import tensor as T
from .autodiff.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .autodiff.nn import Module
from .autodiff.optim import AdamW, AdamWState
from .autodiff.tensor import Tensor
from .config import RunConfig, StageSchedule
from .corpus import ProteinRecord, Tokenizer, build_tokenizer, load_instruction_file, normalize, split_dataset
from .corpus.tokenizer import CLS, DEC
from .encoders import EncoderSpec, MultiLevelEmbeddings, encode, load_embeddings
from .errors import ContractError, FormatError, NotFoundError, NumericError
from .evalsuite import ScoredExample, build_index, evaluate_retrieval, retrieval_metrics, score_corpus
from .generation import (
    AdapterParams,
    DecoderConfig,
    GenerationMode,
    ToyDecoder,
    TuneExample,
    assemble_prompt,
    generate,
    lm_tune_step,
    project_prompts,
    transcript_line,
)
from .plp import PlpConfig, PlpFormer, PretrainBatch, ProteinBatch, TextBatch, plp_pretrain_step

log = logging.getLogger("protchat")

STAGES = ("plp", "align", "tune")
LOG_COLUMNS = {
    "plp": ("ptc", "ptg", "ptm", "total"),
    "align": ("loss",),
    "tune": ("loss",),
}
# independent seed streams per consumer
_SEED_PLP, _SEED_ALIGN, _SEED_DECODER, _SEED_ADAPTER = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# data


@dataclass
class Corpus:
    records: list[ProteinRecord]
    train: list[ProteinRecord]
    eval: list[ProteinRecord]
    base: Path

    def select(self, which: str) -> list[ProteinRecord]:
        return {"train": self.train, "eval": self.eval, "all": self.records}[which]


def load_corpus(cfg: RunConfig) -> Corpus:
    path = cfg.resolve(cfg.data.instructions)
    records = load_instruction_file(path)
    if not records:
        raise ContractError(f"{path}: no records")
    split = split_dataset(records, cfg.data.eval_count, cfg.seed)
    held = set(split.eval)
    return Corpus(
        records,
        [r for r in records if r.id not in held],
        [r for r in records if r.id in held],
        path.parent,
    )


def read_manifest(path: Path) -> dict[str, Path]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:line {lineno}: expected 'id<TAB>path'", field="manifest")
        p = Path(parts[1])
        out[parts[0]] = p if p.is_absolute() else path.parent / p
    return out


def write_manifest(path: Path, entries: Sequence[tuple[str, str]]) -> None:
    atomic_write_bytes(path, "".join(f"{i}\t{p}\n" for i, p in entries).encode())


class EmbeddingSource:
    """Frozen multi-level embeddings per record: precomputed files from the
    manifest when listed there, otherwise the seeded stub encoders."""

    def __init__(self, cfg: RunConfig, base: Path | None = None):
        self.cfg = cfg
        self.base = base or Path(cfg.base_dir)
        mpath = cfg.resolve(cfg.data.manifest)
        self.manifest = read_manifest(mpath) if mpath else {}
        self.stub = EncoderSpec("stub", cfg.encoder.seed, c_seq=cfg.encoder.c_seq, c_ter=cfg.encoder.c_ter)
        self._cache: dict[str, MultiLevelEmbeddings] = {}

    def spec_for(self, rid: str) -> EncoderSpec:
        if rid in self.manifest:
            e = self.cfg.encoder
            return EncoderSpec("file", path=str(self.manifest[rid]), c_seq=e.c_seq, c_ter=e.c_ter)
        return self.stub

    def get(self, rec: ProteinRecord) -> MultiLevelEmbeddings:
        if rec.id not in self._cache:
            e = self.cfg.encoder
            self._cache[rec.id] = encode(rec.sequence, self.spec_for(rec.id), e.max_len, e.trim_seed)
        return self._cache[rec.id]

    def tertiary(self, rec: ProteinRecord) -> np.ndarray | None:
        """Tertiary features for stage 2, or None if the record has no structure source."""
        if not rec.ter_path:
            return None
        emb = self.get(rec)
        if rec.ter_path == "stub":
            return emb.e_ter
        path = Path(rec.ter_path)
        path = path if path.is_absolute() else self.base / path
        if not path.is_file():
            return None
        ter = load_embeddings(path).e_ter
        if ter.shape != emb.e_ter.shape:
            raise FormatError(f"{path}: tertiary shape {ter.shape} != expected {emb.e_ter.shape}", field="dims")
        return ter


def stage2_items(records, src: EmbeddingSource, plp: PlpFormer) -> tuple[list[str], list[tuple], int]:
    """(ids, (E_seq_sel, E_sec, E_ter) per eligible record, skipped count)."""
    ids, items, skipped = [], [], 0
    with T.no_record():
        for rec in records:
            ter = src.tertiary(rec)
            if rec.ss8 is None or ter is None:
                skipped += 1
                continue
            emb = src.get(rec)
            ids.append(rec.id)
            items.append((plp.select(Tensor(emb.e_seq)), Tensor(emb.e_sec), Tensor(ter)))
    return ids, items, skipped


# ---------------------------------------------------------------------------
# models


def plp_config(cfg: RunConfig, vocab_size: int) -> PlpConfig:
    p = cfg.plp
    return PlpConfig(
        n_queries=p.n_queries,
        d_model=p.d_model,
        n_heads=p.n_heads,
        n_layers=p.n_layers,
        ffn_mult=p.ffn_mult,
        vocab_size=vocab_size,
        max_text_len=p.max_text_len,
        c_seq=cfg.encoder.c_seq,
        cross_attention_every=p.cross_attention_every,
        ptc_temperature=p.ptc_temperature,
        w_ptc=p.w_ptc,
        w_ptg=p.w_ptg,
        w_ptm=p.w_ptm,
    )


def decoder_config(cfg: RunConfig, vocab_size: int) -> DecoderConfig:
    d = cfg.decoder
    return DecoderConfig(d.d_lm, d.n_layers, d.n_heads, vocab_size, d.max_seq_len, d.ffn_mult)


@dataclass
class Models:
    tok: Tokenizer
    plp: PlpFormer
    align: AlignmentModel
    decoder: ToyDecoder
    adapter: AdapterParams

    def modules(self) -> dict[str, Module]:
        return {"plp": self.plp, "align": self.align, "decoder": self.decoder, "adapter": self.adapter}


def build_models(cfg: RunConfig, tok: Tokenizer) -> Models:
    V = len(tok)
    return Models(
        tok,
        PlpFormer(plp_config(cfg, V), seed=cfg.seed * 4 + _SEED_PLP),
        AlignmentModel(cfg.plp.d_model, cfg.encoder.c_ter, cfg.plp.n_queries, seed=cfg.seed * 4 + _SEED_ALIGN, kernel=cfg.align.kernel),
        ToyDecoder(decoder_config(cfg, V), seed=cfg.seed * 4 + _SEED_DECODER),
        AdapterParams(cfg.plp.d_model, cfg.decoder.d_lm, seed=cfg.seed * 4 + _SEED_ADAPTER),
    )


def _prefixed(prefix: str, module: Module) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _load_modules(path: Path, modules: dict[str, Module]) -> dict[str, np.ndarray]:
    if not path.is_file():
        raise NotFoundError(f"checkpoint {path} not found (run the earlier stage first)")
    tensors = load_checkpoint(path)
    for prefix, module in modules.items():
        own = {n[len(prefix) + 7:]: v for n, v in tensors.items() if n.startswith(f"model.{prefix}.")}
        try:
            module.load_state_dict(own)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}", field=f"model.{prefix}") from exc
    return tensors


STAGE_MODULES = {"plp": ("plp",), "align": ("align",), "tune": ("adapter", "decoder")}


def load_models(cfg: RunConfig, upto: str = "tune") -> Models:
    """Tokenizer plus every module, with checkpoints loaded through stage ``upto``."""
    out = cfg.out
    tok_path = out / "tokenizer.json"
    if not tok_path.is_file():
        raise NotFoundError(f"{tok_path} not found (run pretrain first)")
    models = build_models(cfg, Tokenizer.load(tok_path))
    mods = models.modules()
    for stage in STAGES[: STAGES.index(upto) + 1]:
        _load_modules(out / f"{stage}.ckpt", {m: mods[m] for m in STAGE_MODULES[stage]})
    return models


# ---------------------------------------------------------------------------
# shared training loop


def _fmt(v: float) -> str:
    return repr(float(v))


def read_loss_log(path: Path) -> list[list[float]]:
    if not path.is_file():
        return []
    return [[float(x) for x in line.split("\t")] for line in path.read_text().splitlines() if line.strip()]


def run_stage(
    cfg: RunConfig,
    stage: str,
    modules: dict[str, Module],
    trainable: dict[str, Tensor],
    schedule: StageSchedule,
    step_fn: Callable[[int, AdamW], dict[str, float]],
    resume: bool = False,
) -> dict:
    """Drive ``step_fn`` for ``schedule.steps`` updates with periodic atomic checkpoints.

    A non-finite loss aborts before any further write, so the last checkpoint
    on disk is the last good state.
    """
    out = cfg.out
    ckpt = out / f"{stage}.ckpt"
    log_path = out / f"{stage}_loss.tsv"
    state = AdamWState(
        beta1=schedule.beta1,
        beta2=schedule.beta2,
        weight_decay=schedule.weight_decay,
        lr=schedule.peak_lr,
        peak_lr=schedule.peak_lr,
        min_lr=schedule.min_lr,
        warmup=schedule.warmup,
    )
    opt = AdamW(trainable, state, total_steps=schedule.steps)
    lines: list[str] = []
    if resume and ckpt.is_file():
        tensors = _load_modules(ckpt, modules)
        state.load_tensors(tensors)
        lines = log_path.read_text().splitlines()[: state.step] if log_path.is_file() else []
        if len(lines) != state.step:
            raise FormatError(f"{log_path} has {len(lines)} lines, checkpoint is at step {state.step}", field="log")

    def snapshot():
        tensors = {}
        for prefix, m in modules.items():
            tensors.update({f"model.{k}": v.data for k, v in _prefixed(prefix, m).items()})
        tensors.update(state.tensors())
        save_checkpoint(ckpt, tensors)
        atomic_write_bytes(log_path, "".join(l + "\n" for l in lines).encode())

    start = state.step
    last: dict[str, float] = {}
    for step in range(start, schedule.steps):
        try:
            last = step_fn(step, opt)
        except NumericError as exc:
            raise NumericError(f"{stage} step {step + 1}: {exc}; last good checkpoint kept at {ckpt}") from exc
        values = [last[c] for c in LOG_COLUMNS[stage]]
        if not all(math.isfinite(v) for v in values):
            raise NumericError(f"{stage} step {step + 1}: non-finite loss; last good checkpoint kept at {ckpt}")
        lines.append("\t".join([str(step + 1), _fmt(last["lr"])] + [_fmt(v) for v in values]))
        if (step + 1) % schedule.checkpoint_every == 0 or step + 1 == schedule.steps:
            snapshot()
    if start >= schedule.steps and not ckpt.is_file():
        snapshot()
    return {"stage": stage, "steps": schedule.steps, "resumed_from": start, **last}


def _batch_indices(seed: int, stream: int, step: int, n: int, size: int) -> np.ndarray:
    """Batches are a pure function of (seed, stage stream, step) so resume replays exactly."""
    rng = np.random.default_rng([seed, stream, step])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


# ---------------------------------------------------------------------------
# stage 1


def corpus_texts(records: Iterable[ProteinRecord]) -> list[str]:
    texts = []
    for r in records:
        if r.description:
            texts.append(r.description)
        for q, a in r.qa:
            texts.extend([q, a])
    return texts


def text_batch(tok: Tokenizer, texts: Sequence[str], lead: str, max_len: int) -> TextBatch:
    rows = [tok.encode(t) for t in texts]
    return TextBatch.from_token_lists(rows, tok.special(lead), tok.pad_id, max_len, tok.eos_id)


def cmd_pretrain(cfg: RunConfig, resume: bool = False) -> dict:
    corpus = load_corpus(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tok = build_tokenizer(corpus_texts(corpus.train), cfg.tokenizer.max_vocab)
    atomic_write_bytes(out / "tokenizer.json", tok.to_json().encode())
    split = {"seed": cfg.seed, "train": [r.id for r in corpus.train], "eval": [r.id for r in corpus.eval]}
    atomic_write_bytes(out / "split.json", (json.dumps(split, indent=1) + "\n").encode())

    records = [r for r in corpus.train if r.description]
    if len(records) < 2:
        raise ContractError("stage 1 needs at least two training records with a description")
    src = EmbeddingSource(cfg, corpus.base)
    e_seqs = [Tensor(src.get(r).e_seq) for r in records]
    descs = [r.description for r in records]
    text_cls = text_batch(tok, descs, CLS, cfg.plp.max_text_len)
    text_dec = text_batch(tok, descs, DEC, cfg.plp.max_text_len)
    dec_id = tok.special(DEC)
    models = build_models(cfg, tok)
    plp = models.plp
    sched = cfg.pretrain

    def step_fn(step, opt):
        idx = _batch_indices(cfg.seed, 1, step, len(records), sched.batch_size)
        batch = PretrainBatch(
            ProteinBatch.from_list([e_seqs[i] for i in idx]),
            text_cls.take(idx),
            text_dec.take(idx),
            dec_id,
        )
        return plp_pretrain_step(plp, batch, opt)

    summary = run_stage(cfg, "plp", {"plp": plp}, _prefixed("plp", plp), sched, step_fn, resume)
    summary["records"] = len(records)
    return summary


# ---------------------------------------------------------------------------
# stage 2


def cmd_align(cfg: RunConfig, resume: bool = False) -> dict:
    corpus = load_corpus(cfg)
    models = load_models(cfg, upto="plp")
    models.plp.freeze()
    src = EmbeddingSource(cfg, corpus.base)
    ids, items, skipped = stage2_items(corpus.train, src, models.plp)
    if skipped:
        log.warning("align: skipped %d record(s) without ss8 labels or tertiary data", skipped)
    if len(items) < 2:
        raise ContractError("stage 2 needs at least two training records with ss8 and tertiary data")
    full = AlignBatch.from_items(items)
    align = models.align
    sched = cfg.align_train

    def step_fn(step, opt):
        idx = _batch_indices(cfg.seed, 2, step, len(items), sched.batch_size)
        return align_train_step(align, full.take(idx), opt, cfg.align.k_negatives, cfg.align.tau)

    summary = run_stage(cfg, "align", {"align": align}, _prefixed("align", align), sched, step_fn, resume)
    summary.update(records=len(items), skipped=skipped)
    return summary


# ---------------------------------------------------------------------------
# stage 3


def protein_prompt_inputs(models: Models, emb: MultiLevelEmbeddings, e_ter: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Frozen (E_align, projected E_ter) for one protein."""
    with T.no_record():
        sel = models.plp.select(Tensor(emb.e_seq))
        e_align = pcg_forward(sel, Tensor(emb.e_sec), models.align.pcg)
        ter = project_tertiary(Tensor(emb.e_ter if e_ter is None else e_ter), models.align.projector)
    return Tensor(e_align.data), Tensor(ter.data)


def _tertiary_or_encoder(src: EmbeddingSource, rec: ProteinRecord) -> np.ndarray:
    ter = src.tertiary(rec)
    return src.get(rec).e_ter if ter is None else ter


def tune_examples(models: Models, records, src: EmbeddingSource) -> tuple[list[TuneExample], int]:
    tok = models.tok
    examples, skipped = [], 0
    for rec in records:
        if not rec.qa:
            skipped += 1
            continue
        e_align, e_ter = protein_prompt_inputs(models, src.get(rec), _tertiary_or_encoder(src, rec))
        for q, a in rec.qa:
            examples.append(TuneExample(rec.id, e_align, e_ter, tok.encode(q), tok.encode(a) + [tok.eos_id]))
    return examples, skipped


def cmd_tune(cfg: RunConfig, resume: bool = False) -> dict:
    corpus = load_corpus(cfg)
    models = load_models(cfg, upto="align")
    models.plp.freeze()
    models.align.freeze()
    src = EmbeddingSource(cfg, corpus.base)
    examples, skipped = tune_examples(models, corpus.train, src)
    if skipped:
        log.warning("tune: skipped %d record(s) without qa pairs", skipped)
    if not examples:
        raise ContractError("stage 3 needs at least one training record with qa pairs")
    trainable = _prefixed("adapter", models.adapter)
    if cfg.decoder.unfreeze:
        trainable.update(_prefixed("decoder", models.decoder))
    else:
        models.decoder.freeze()
    sched = cfg.tune

    def step_fn(step, opt):
        idx = _batch_indices(cfg.seed, 3, step, len(examples), sched.batch_size)
        return lm_tune_step([examples[i] for i in idx], models.decoder, models.adapter, opt, models.tok)

    modules = {"adapter": models.adapter, "decoder": models.decoder}
    summary = run_stage(cfg, "tune", modules, trainable, sched, step_fn, resume)
    summary.update(examples=len(examples), skipped=skipped)
    return summary


# ---------------------------------------------------------------------------
# inference


def answer_question(
    cfg: RunConfig,
    models: Models,
    e_align: Tensor,
    e_ter: Tensor,
    question: str,
    mode: GenerationMode | None = None,
) -> tuple[list[int], str, bool]:
    tok = models.tok
    mode = mode or GenerationMode(cfg.eval.mode, cfg.eval.top_k, cfg.seed)
    with T.no_record():
        prompts = project_prompts(e_align, e_ter, models.adapter)
    q_ids = tok.encode(question)
    if not q_ids:
        raise ContractError("question has no tokens")
    seq = assemble_prompt(Tensor(prompts.data), q_ids, None, tok)
    result = generate(seq, models.decoder, mode, tok.eos_id, cfg.eval.max_new_tokens)
    return result.tokens, tok.decode(result.tokens), result.truncated


def _content_tokens(tok: Tokenizer, ids: Sequence[int]) -> list[str]:
    text = tok.decode(ids)
    return text.split() if text else []


def cmd_eval(cfg: RunConfig, split: str | None = None) -> dict:
    split = split or cfg.eval.split
    if split not in ("train", "eval", "all"):
        raise ContractError(f"split must be train, eval or all, got {split!r}")
    corpus = load_corpus(cfg)
    records = corpus.select(split)
    if not records:
        raise ContractError(f"{split} split is empty")
    models = load_models(cfg, upto="tune")
    src = EmbeddingSource(cfg, corpus.base)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)

    transcripts, scored = [], []
    for rec in records:
        if not rec.qa:
            continue
        e_align, e_ter = protein_prompt_inputs(models, src.get(rec), _tertiary_or_encoder(src, rec))
        for j, (q, a) in enumerate(rec.qa):
            ids, text, truncated = answer_question(cfg, models, e_align, e_ter, q)
            transcripts.append(transcript_line(rec.id, q, text, truncated))
            gold = normalize(a)
            scored.append(ScoredExample(f"{rec.id}#{j}", _content_tokens(models.tok, ids), [gold], text, " ".join(gold)))
    text_report = score_corpus(scored) if scored else {"aggregate": {"count": 0}, "per_example": []}
    _clean_nan(text_report)

    report = {"split": split, "records": len(records), "text": text_report}
    report["plp_retrieval"] = _plp_retrieval(cfg, models, records, src)
    report["cross_level"] = _cross_level(models, records, src)

    atomic_write_bytes(out / "transcripts.jsonl", "".join(l + "\n" for l in transcripts).encode())
    atomic_write_bytes(out / "report.json", (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    atomic_write_bytes(out / "metrics.tsv", metrics_tsv(report).encode())
    if cfg.eval.figures:
        from .plotting import render_report_figures

        report_figs = render_report_figures(cfg.out, report, out / "figures")
        log.info("wrote %d figure(s)", len(report_figs))
    return report


def _clean_nan(obj):
    """NaN is not valid JSON; undefined scores become null."""
    if isinstance(obj, dict):
        for k, v in obj.items():
            if isinstance(v, float) and math.isnan(v):
                obj[k] = None
            else:
                _clean_nan(v)
    elif isinstance(obj, list):
        for v in obj:
            _clean_nan(v)


def _plp_retrieval(cfg: RunConfig, models: Models, records, src) -> dict | None:
    recs = [r for r in records if r.description]
    if not recs:
        return None
    proteins = ProteinBatch.from_list([Tensor(src.get(r).e_seq) for r in recs])
    texts = text_batch(models.tok, [r.description for r in recs], CLS, cfg.plp.max_text_len)
    index = build_index(models.plp, [r.id for r in recs], proteins, texts)
    res = evaluate_retrieval(index, models.plp, cfg.eval.k_rank)
    res["count"] = len(recs)
    return res


def _cross_level(models: Models, records, src) -> dict | None:
    ids, items, skipped = stage2_items(records, src, models.plp)
    if not items:
        return None
    with T.no_record():
        ranks = cross_level_rankings(models.align, AlignBatch.from_items(items))
    ranked = [[ids[j] for j in row] for row in ranks]
    acc, r20 = retrieval_metrics(ranked, ids)
    return {"acc": acc, "r20": r20, "count": len(ids), "skipped": skipped}


def metrics_tsv(report: dict) -> str:
    rows = [("split", report["split"])]
    for k, v in sorted(report["text"]["aggregate"].items()):
        rows.append((f"text.{k}", v))
    for section in ("plp_retrieval", "cross_level"):
        for k, v in sorted((report.get(section) or {}).items()):
            rows.append((f"{section}.{k}", v))
    return "".join(f"{k}\t{'' if v is None else v}\n" for k, v in rows)


def encode_protein_file(cfg: RunConfig, path: Path, chain: str | None = None) -> tuple[str, MultiLevelEmbeddings]:
    """FASTA (first record), PDB (``chain`` required) or a precomputed .pemb file."""
    from .corpus import parse_fasta, parse_pdb_chain

    if not path.is_file():
        raise NotFoundError(f"protein file {path} not found")
    if path.suffix == ".pemb":
        return path.stem, load_embeddings(path)
    data = path.read_bytes()
    if path.suffix.lower() in (".pdb", ".ent"):
        if not chain:
            raise ContractError("PDB input needs an explicit chain id")
        seq = parse_pdb_chain(data, chain, source=str(path), protein_id=f"{path.stem}_{chain}")
    else:
        recs = parse_fasta(data, source=str(path))
        if not recs:
            raise ContractError(f"{path}: no FASTA records")
        seq = recs[0]
    e = cfg.encoder
    spec = EncoderSpec("stub", e.seed, c_seq=e.c_seq, c_ter=e.c_ter)
    return seq.id, encode(seq, spec, e.max_len, e.trim_seed)
