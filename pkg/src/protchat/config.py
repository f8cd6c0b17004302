"""Run configuration: one YAML tree, validated into dataclasses, with
``section.key=value`` overrides from the command line."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .autodiff.optim import BETA1, BETA2, WEIGHT_DECAY
from .errors import ContractError, ParseError

CONFIG_ENV = "PROTCHAT_CONFIG"


@dataclass
class DataSection:
    instructions: str = ""
    eval_count: int = 0
    manifest: str | None = None


@dataclass
class EncoderSection:
    seed: int = 0
    c_seq: int = 64
    c_ter: int = 32
    max_len: int = 3000
    trim_seed: int = 0


@dataclass
class TokenizerSection:
    max_vocab: int | None = 512


@dataclass
class PlpSection:
    n_queries: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    max_text_len: int = 32
    cross_attention_every: int = 1
    ptc_temperature: float = 0.07
    w_ptc: float = 1.0
    w_ptg: float = 1.0
    w_ptm: float = 1.0


@dataclass
class AlignSection:
    kernel: int = 5
    tau: float = 0.8
    k_negatives: int = 128


@dataclass
class DecoderSection:
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    ffn_mult: int = 4
    unfreeze: bool = False


@dataclass
class StageSchedule:
    steps: int = 100
    batch_size: int = 8
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup: int = 10
    beta1: float = BETA1
    beta2: float = BETA2
    weight_decay: float = WEIGHT_DECAY
    checkpoint_every: int = 50


@dataclass
class EvalSection:
    split: str = "eval"
    max_new_tokens: int = 32
    mode: str = "greedy"
    top_k: int = 5
    k_rank: int = 16
    figures: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    plp: PlpSection = field(default_factory=PlpSection)
    align: AlignSection = field(default_factory=AlignSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    pretrain: StageSchedule = field(default_factory=StageSchedule)
    align_train: StageSchedule = field(default_factory=StageSchedule)
    tune: StageSchedule = field(default_factory=StageSchedule)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: str = field(default=".", metadata={"internal": True})

    def resolve(self, p: str | None) -> Path | None:
        if p is None or p == "":
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, tree: Any, where: str):
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ContractError(f"config section {where or '<root>'} must be a mapping")
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    for key, value in tree.items():
        if key not in known:
            raise ContractError(f"unknown config key {where + key!r}")
        f = known[key]
        ftype = f.type if not isinstance(f.type, str) else eval(f.type, globals())  # noqa: S307
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, f"{where}{key}.")
        else:
            kwargs[key] = _coerce(value, f.default, where + key)
    return cls(**kwargs)


def _coerce(value, default, name):
    if value is None or default is None or default is dataclasses.MISSING:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ContractError(f"config key {name!r} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ContractError(f"config key {name!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ContractError(f"config key {name!r} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ContractError(f"config key {name!r} must be a string")
    return value


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """``a.b=value`` with the value parsed as YAML (so numbers and booleans type-check)."""
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ContractError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def validate(cfg: RunConfig, need_data: bool = True) -> RunConfig:
    if need_data:
        path = cfg.resolve(cfg.data.instructions)
        if path is None or not path.is_file():
            raise ContractError(f"data.instructions {cfg.data.instructions!r} does not exist")
    if cfg.data.manifest is not None and not cfg.resolve(cfg.data.manifest).is_file():
        raise ContractError(f"data.manifest {cfg.data.manifest!r} does not exist")
    if cfg.eval.split not in ("train", "eval", "all"):
        raise ContractError(f"eval.split must be train, eval or all, got {cfg.eval.split!r}")
    if cfg.eval.mode not in ("greedy", "top_k"):
        raise ContractError(f"eval.mode must be greedy or top_k, got {cfg.eval.mode!r}")
    for name in ("pretrain", "align_train", "tune"):
        s: StageSchedule = getattr(cfg, name)
        if s.steps < 1 or s.batch_size < 1 or s.checkpoint_every < 1:
            raise ContractError(f"{name}: steps, batch_size and checkpoint_every must be >= 1")
        if s.peak_lr <= 0 or s.min_lr < 0 or s.warmup < 0:
            raise ContractError(f"{name}: learning rates must be positive and warmup >= 0")
    if cfg.encoder.c_seq < 1 or cfg.encoder.c_ter < 1 or cfg.encoder.max_len < 1:
        raise ContractError("encoder dims and max_len must be positive")
    return cfg


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None, need_data: bool = True) -> RunConfig:
    """Read YAML from ``path`` (or $PROTCHAT_CONFIG); relative paths resolve against its directory."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise ContractError(f"no config given (pass --config or set {CONFIG_ENV})")
    path = Path(path)
    if not path.is_file():
        raise ContractError(f"config file {str(path)!r} does not exist")
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        raise ParseError(f"invalid YAML: {exc}", line=None if line is None else line + 1, source=str(path)) from exc
    tree = apply_overrides(tree, overrides or [])
    cfg = _build(RunConfig, tree, "")
    cfg.base_dir = str(path.parent.resolve())
    return validate(cfg, need_data)
