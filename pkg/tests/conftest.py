from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from protchat.autodiff.tensor import default_dtype
from protchat.corpus import dump_instructions
from protchat.toydata import make_records

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "data": {"instructions": "toy.jsonl", "eval_count": 0},
    "encoder": {"c_seq": 32, "c_ter": 24},
    "plp": {"d_model": 32, "n_layers": 1, "max_text_len": 24},
    "decoder": {"d_lm": 64, "unfreeze": True},
    "pretrain": {"steps": 10, "batch_size": 8, "checkpoint_every": 5},
    "align_train": {"steps": 10, "batch_size": 8, "peak_lr": 0.003, "checkpoint_every": 5},
    "tune": {"steps": 10, "batch_size": 8, "peak_lr": 0.001, "warmup": 2, "checkpoint_every": 5},
    "eval": {"split": "train", "figures": False},
}


def deep_update(base: dict, upd: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in upd.items():
        out[k] = deep_update(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def write_toy_run(directory: Path, n: int = 8, seed: int = 0, records=None, **overrides) -> Path:
    """Toy corpus plus config in ``directory``; returns the config path."""
    directory.mkdir(parents=True, exist_ok=True)
    records = records if records is not None else make_records(n, seed=seed)
    (directory / "toy.jsonl").write_text(dump_instructions(records))
    cfg = deep_update(TOY_CONFIG, overrides)
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


@pytest.fixture
def toy_run(tmp_path):
    return lambda **kw: write_toy_run(tmp_path / "run", **kw)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One memorizing three-stage run shared by the eval and chat tests."""
    from helpers import stage3_run

    return stage3_run(tmp_path_factory.mktemp("trained") / "run")


# acceptance criteria report their outcome here; printed once at the end of the run
CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        name, status, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d} {status}  {name}  {detail}")
