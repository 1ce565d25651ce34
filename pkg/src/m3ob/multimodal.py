"""Image projection, image relational graph, gated fusion and user preference."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, MLP
from .stkg import EntitySizes, KGEmbeddings, visit
from .strg import RelationalGraph, gcn_propagate


def project_and_sum(
    features: Mapping[str, np.ndarray | Tensor],
    projections: Mapping[str, Linear | MLP],
    scales: Sequence[str] | None = None,
) -> Tensor:
    """Sum over scales of the per-scale projection of frozen raw features."""
    scales = list(scales if scales is not None else projections)
    missing = [s for s in scales if s not in features]
    if missing:
        raise KeyError(f"no image features for scale(s) {missing}")
    out = None
    for s in scales:
        raw = features[s]
        raw = raw if isinstance(raw, Tensor) else ad.constant(raw)
        z = projections[s](raw)
        out = z if out is None else out + z
    return out


def image_graph_propagate(
    location_graph: RelationalGraph | None, z_img: Tensor, W: Tensor | Sequence[Tensor], activation: str = "relu"
) -> Tensor:
    """Propagate projected image features over the location graph's structure.

    With no location graph (relational graph ablated) the input is returned.
    """
    if location_graph is None:
        return z_img
    return gcn_propagate(location_graph.share("image"), z_img, W, activation)


def gated_fuse(z_id: Tensor, z_img: Tensor, gate: Linear) -> tuple[Tensor, Tensor]:
    """Return (mixed, gate): g = sigmoid([z_id || z_img] W + b), mixed = g*z_id + (1-g)*z_img."""
    if z_id.shape != z_img.shape:
        raise ShapeError(f"gated_fuse: {z_id.shape} vs {z_img.shape}")
    g = ad.sigmoid(gate(ad.concat([z_id, z_img], axis=-1)))
    return g * z_id + (1.0 - g) * z_img, g


def residual_blend(z_mix: Tensor, z_loc: Tensor, z_img: Tensor, alpha: float) -> tuple[Tensor, Tensor]:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * z_mix + (1.0 - alpha) * z_loc, alpha * z_mix + (1.0 - alpha) * z_img


def user_preference(
    user: int,
    slot: int,
    location: int,
    emb: KGEmbeddings,
    location_category: np.ndarray,
    category_activity: np.ndarray,
) -> np.ndarray:
    """P_multi for one record: sum over location/category/activity of ent_u + r_visit(slot) + ent_k."""
    if not 0 <= location < len(location_category):
        raise KeyError(f"location {location} is not in the hierarchy")
    if not 0 <= slot < 48:
        raise ValueError(f"slot {slot} outside [0, 48)")
    c = int(location_category[location])
    a = int(category_activity[c])
    ent_u = emb.table("user")[user]
    rel = emb.relation_vector(visit(slot))
    total = np.zeros(emb.dim)
    for kind, idx in (("location", location), ("category", c), ("activity", a)):
        total = total + (ent_u + rel + emb.table(kind)[idx])
    return total


def user_preference_batch(
    entity: Tensor,
    relation: Tensor,
    sizes: EntitySizes,
    users: np.ndarray,
    slots: np.ndarray,
    locations: np.ndarray,
    categories: np.ndarray,
    activities: np.ndarray,
    levels: Sequence[str] = ("location", "category", "activity"),
) -> Tensor:
    """Batched P_multi over index arrays of equal shape; differentiable in the tables."""
    idx = {"location": locations, "category": categories, "activity": activities}
    ent_u = ad.take(entity, users + sizes.offset("user"))
    rel = ad.take(relation, slots + 1)
    out = None
    for level in levels:
        term = ent_u + rel + ad.take(entity, idx[level] + sizes.offset(level))
        out = term if out is None else out + term
    return out
