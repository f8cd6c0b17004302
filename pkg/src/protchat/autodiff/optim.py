"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.98
WEIGHT_DECAY = 0.05
PEAK_LR = 1e-4
MIN_LR = 8e-5
WARMUP_STEPS = 5000


def cosine_lr(step: int, peak: float, min_lr: float, warmup: int, total: int) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then cosine decay to ``min_lr``.

    Steps past ``total`` clamp to ``min_lr``.
    """
    if warmup >= total:
        raise ContractError(f"warmup ({warmup}) must be < total ({total})")
    if step >= total:
        return float(min_lr)
    if step < warmup:
        return float(peak) * step / warmup
    progress = (step - warmup) / (total - warmup)
    return float(min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamWState:
    beta1: float = BETA1
    beta2: float = BETA2
    weight_decay: float = WEIGHT_DECAY
    eps: float = 1e-8
    lr: float = PEAK_LR
    peak_lr: float = PEAK_LR
    min_lr: float = MIN_LR
    warmup: int = WARMUP_STEPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        """Flatten moments and the step counter for checkpointing."""
        out = {"opt.step": np.array([self.step], dtype=np.float64)}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if "opt.step" in tensors:
            self.step = int(np.asarray(tensors["opt.step"]).reshape(-1)[0])
        for key, arr in tensors.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = np.array(arr)
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = np.array(arr)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamWState,
    lr: float | None = None,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> None:
    """One in-place AdamW update.

    ``grads`` defaults to each parameter's ``.grad``. Parameters without a
    gradient are skipped entirely (frozen); names in ``no_decay`` skip the
    weight-decay term only.
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ContractError(f"moment for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        mhat = m / bc1
        vhat = v / bc2
        data = p.data
        if state.weight_decay and name not in no_decay:
            data = data - lr * state.weight_decay * data
        data = data - lr * mhat / (np.sqrt(vhat) + state.eps)
        p.data = data.astype(p.dtype, copy=False)


class AdamW:
    """Binds a parameter dict to an :class:`AdamWState` and a schedule."""

    def __init__(self, params: dict[str, Tensor], state: AdamWState, total_steps: int):
        self.params = params
        self.state = state
        self.total_steps = total_steps
        # biases, layer-norm scales and other vectors are left undecayed
        self.no_decay = frozenset(n for n, p in params.items() if p.ndim < 2)

    def current_lr(self) -> float:
        """Rate for the next update (1-based update index)."""
        s = self.state
        if s.warmup >= self.total_steps:
            # short desk runs: no room for the configured warmup, hold at peak
            return float(s.peak_lr)
        return cosine_lr(s.step + 1, s.peak_lr, s.min_lr, s.warmup, self.total_steps)

    def step(self) -> float:
        lr = self.current_lr()
        if lr <= 0:
            # min_lr of 0 at the end of the schedule: advance without moving
            self.state.step += 1
            return lr
        adamw_step(self.params, None, self.state, lr, self.no_decay)
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
