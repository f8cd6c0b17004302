"""Parameter containers and the attention primitive shared by both transformers."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_default_dtype


class Module:
    """Walks its attributes to discover parameters, sub-modules and module lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            value = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def fingerprint(self) -> str:
        """SHA-256 over parameter names and raw bytes; used to prove freezing."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def param(data: np.ndarray, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype or get_default_dtype())


def normal(rng: np.random.Generator, shape, std: float, dtype=None) -> Tensor:
    return param(rng.normal(0.0, std, size=shape), dtype)


def zeros(shape, dtype=None) -> Tensor:
    return param(np.zeros(shape), dtype)


def ones(shape, dtype=None) -> Tensor:
    return param(np.ones(shape), dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=None):
        self.weight = normal(rng, (d_in, d_out), d_in**-0.5, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=None):
        self.gain = ones((d,), dtype)
        self.bias = zeros((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int, dtype=None):
        self.fc1 = Linear(rng, d, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, d, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """softmax(QK^T/sqrt(d_k) restricted by mask) V, then the output projection.

    Keys and values may come from a different width (``d_kv``), which is how
    the cross-attention reads protein features directly.
    """

    def __init__(self, rng, d: int, n_heads: int, d_kv: int | None = None, dtype=None):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
        d_kv = d if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(rng, d, d, dtype=dtype)
        self.k = Linear(rng, d_kv, d, dtype=dtype)
        self.v = Linear(rng, d_kv, d, dtype=dtype)
        self.o = Linear(rng, d, d, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.n_heads
        return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask: np.ndarray | None = None,
        return_weights: bool = False,
    ):
        """``x_q`` (B, Lq, d), ``x_kv`` (B, Lk, d_kv); ``mask`` broadcasts to
        (B, H, Lq, Lk) with True meaning attention is allowed."""
        b, lq, d = x_q.shape
        q = self._split(self.q(x_q))
        k = self._split(self.k(x_kv))
        v = self._split(self.v(x_kv))
        dk = d // self.n_heads
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dk))
        weights = T.softmax(scores, axis=-1, mask=mask)
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
        out = self.o(ctx)
        return (out, weights) if return_weights else out


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
