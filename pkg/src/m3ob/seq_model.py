"""Record embedding, Time2Vec, causal transformer and the four prediction heads."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import MLP, LayerNorm, Module, TransformerBlock


class Time2Vec(Module):
    """Component 0 is ``w0*t + b0``; components 1.. are ``sin(w_i*t + b_i)``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim < 2:
            raise ValueError("Time2Vec needs at least one linear and one periodic component")
        self.dim = dim
        self.linear_w = Tensor(rng.normal(0.0, 1.0, size=1), requires_grad=True)
        self.linear_b = Tensor(np.zeros(1), requires_grad=True)
        self.periodic_w = Tensor(rng.normal(0.0, 2 * np.pi, size=dim - 1), requires_grad=True)
        self.periodic_b = Tensor(rng.uniform(0.0, 2 * np.pi, size=dim - 1), requires_grad=True)

    def __call__(self, t) -> Tensor:
        t = t if isinstance(t, Tensor) else ad.constant(np.asarray(t, dtype=np.float64)[..., None])
        linear = t * self.linear_w + self.linear_b
        periodic = ad.sin(t * self.periodic_w + self.periodic_b)
        return ad.concat([linear, periodic], axis=-1)


def time2vec(t_norm: float, omega0: float, phi0: float, omega: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Plain numpy Time2Vec for a single scalar time."""
    return np.concatenate([[omega0 * t_norm + phi0], np.sin(np.asarray(omega) * t_norm + np.asarray(phi))])


def build_record_embedding(
    f_loc: MLP,
    f_ctx: MLP,
    z_loc: Tensor,
    z_user: Tensor,
    ctx_parts: Sequence[Tensor],
    preference: Tensor | None,
    z_img: Tensor | None,
) -> Tensor:
    """[f(loc, user) || f(category, activity, time) || preference || image]; absent blocks are skipped."""
    blocks = [f_loc(ad.concat([z_loc, z_user], axis=-1)), f_ctx(ad.concat(list(ctx_parts), axis=-1))]
    if preference is not None:
        blocks.append(preference)
    if z_img is not None:
        blocks.append(z_img)
    return ad.concat(blocks, axis=-1)


class CausalTransformer(Module):
    """Learned positions + pre-norm causal self-attention blocks + final norm."""

    def __init__(
        self, dim: int, layers: int, heads: int, ff_dim: int, dropout: float, max_len: int, rng: np.random.Generator
    ):
        self.dim = dim
        self.max_len = max_len
        self.positions = Tensor(rng.normal(0.0, 0.02, size=(max_len, dim)), requires_grad=True)
        self.blocks = [TransformerBlock(dim, heads, ff_dim, dropout, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, z: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if z.ndim != 3:
            raise ShapeError(f"expected (batch, time, dim) input, got {z.shape}")
        T = z.shape[1]
        if T == 0:
            raise ValueError("empty sequence")
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {self.max_len}")
        x = z + ad.take(self.positions, np.arange(T))
        x = ad.dropout(x, self.dropout, self.rng, self.training)
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)

    def attention_weights(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]


class HeadOutputs(NamedTuple):
    location: Tensor
    category: Tensor
    activity: Tensor
    time: Tensor


class PredictionHeads(Module):
    def __init__(self, dim: int, hidden: int, n_locations: int, n_categories: int, n_activities: int, rng):
        self.location = MLP([dim, hidden, n_locations], rng)
        self.category = MLP([dim, hidden, n_categories], rng)
        self.activity = MLP([dim, hidden, n_activities], rng)
        self.time = MLP([dim, hidden, 1], rng)

    def __call__(self, h: Tensor) -> HeadOutputs:
        y_t = self.time(h)
        return HeadOutputs(
            self.location(h), self.category(h), self.activity(h), y_t.reshape(y_t.shape[:-1])
        )
