"""Central finite-difference oracle for the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


# central differences in f64 carry ~1e-11 roundoff; gradients that are
# identically zero (e.g. key biases under softmax) must not divide by noise
NORM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, NORM_FLOOR)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
    tape = Tape()
    with tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error per input between tape gradients and central differences.

    ``max_entries`` limits the finite-difference probes to a random subset of
    coordinates for large parameters.
    """
    grads = analytic_grads(fn, inputs)
    errors = []
    for x, g in zip(inputs, grads):
        if max_entries is None or x.size <= max_entries:
            errors.append(relative_error(g, numeric_grad(fn, x, h)))
            continue
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(x.size, size=max_entries, replace=False)
        flat = x.data.reshape(-1)
        num = np.zeros(max_entries)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        errors.append(relative_error(g.reshape(-1)[idx], num))
    return errors
