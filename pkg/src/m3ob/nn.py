"""Small layer library on top of :mod:`m3ob.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_FILL = -1e30


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            _collect(value, f"{prefix}{key}", out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else (
                value.values() if isinstance(value, dict) else (value,)
            )
            for child in children:
                if isinstance(child, Module):
                    child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def _collect(value, name: str, out: dict[str, Tensor]) -> None:
    # walk nested modules, lists and dicts; frozen tensors are skipped
    if isinstance(value, Tensor):
        if value.requires_grad:
            out[name] = value
    elif isinstance(value, Module):
        out.update(value.named_parameters(name + "."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect(item, f"{name}.{i}", out)
    elif isinstance(value, dict):
        for k, item in value.items():
            _collect(item, f"{name}.{k}", out)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(glorot(rng, n_in, n_out), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (T, T) mask, true where attention is forbidden (key after query)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, dropout: float, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.dropout = dropout
        self.rng = rng
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, key_padding: np.ndarray | None = None) -> Tensor:
        B, T, D = x.shape
        h, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, T, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3, B, h, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        blocked = causal_mask(T)[None, None]
        if key_padding is not None:
            blocked = blocked | ~key_padding[:, None, None, :].astype(bool)
        scores = ad.masked_fill(scores, blocked, NEG_FILL)
        weights = ad.softmax(scores, axis=-1)
        self.last_weights = weights.data
        weights = ad.dropout(weights, self.dropout, self.rng, self.training)
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm causal self-attention block."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = MLP([dim, ff_dim, dim], rng)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor, key_padding: np.ndarray | None = None) -> Tensor:
        x = x + ad.dropout(self.attn(self.norm1(x), key_padding), self.dropout, self.rng, self.training)
        x = x + ad.dropout(self.ff(self.norm2(x)), self.dropout, self.rng, self.training)
        return x
