"""Parameter containers and the transformer building blocks shared by the model."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, current_dtype, gelu, layer_norm, softmax


def param(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=current_dtype()), requires_grad=True, name=name)


class Module:
    """Collects Tensor parameters and child modules from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02, bias: bool = True):
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over axis -2 of ``(..., T, D)`` inputs.

    Keys/values may come from a different sequence (cross-attention).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        h = self.heads
        x = x.reshape(*lead, t, h, d // h)
        n = len(lead)
        return x.transpose(*range(n), n + 1, n, n + 2)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        *lead, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = (q @ k.T) * (1.0 / np.sqrt(d // self.heads))
        attn = softmax(scores, axis=-1)
        self.last_weights = attn.data
        y = attn @ v
        n = len(lead)
        y = y.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, t, d)
        return self.out(y)


class Block(Module):
    """Pre-norm residual self-attention block followed by a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
