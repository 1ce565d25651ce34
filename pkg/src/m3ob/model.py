"""The full multi-modal mobility model: graph fusion tables feeding a causal sequence model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import effective_flags
from .data import SLOTS_PER_DAY, EncodedSequence, ImageFeatureSet
from .multimodal import gated_fuse, image_graph_propagate, project_and_sum, residual_blend, user_preference_batch
from .nn import MLP, Linear, Module, glorot
from .seq_model import CausalTransformer, HeadOutputs, PredictionHeads, Time2Vec, build_record_embedding
from .stkg import KGEmbeddings
from .strg import RelationalGraph, gcn_propagate, residual_update


@dataclass
class Batch:
    users: np.ndarray
    locations: np.ndarray
    categories: np.ndarray
    activities: np.ndarray
    slots: np.ndarray
    mask: np.ndarray
    target_location: np.ndarray
    target_category: np.ndarray
    target_activity: np.ndarray
    target_time: np.ndarray
    target_mask: np.ndarray
    target_rainy: np.ndarray
    target_cold: np.ndarray


def windows(sequences: Sequence[EncodedSequence], max_len: int) -> list[EncodedSequence]:
    """Split sequences longer than ``max_len`` into windows overlapping by one record."""
    out = []
    for s in sequences:
        if len(s) <= max_len:
            out.append(s)
            continue
        for start in range(0, len(s) - 1, max_len - 1):
            sl = slice(start, start + max_len)
            out.append(
                EncodedSequence(s.user, s.locations[sl], s.categories[sl], s.activities[sl], s.slots[sl], s.rainy[sl], s.cold[sl])
            )
    return out


def collate(sequences: Sequence[EncodedSequence], last_position_only: bool = False) -> Batch:
    """Pad to the longest sequence; position t is trained to predict record t+1."""
    B = len(sequences)
    T = max(len(s) for s in sequences)
    z = lambda dtype=np.int64: np.zeros((B, T), dtype=dtype)  # noqa: E731
    locs, cats, acts, slots = z(), z(), z(), z()
    mask, tmask = z(bool), z(bool)
    t_loc, t_cat, t_act = z(), z(), z()
    t_time = np.zeros((B, T))
    t_rain, t_cold = z(bool), z(bool)
    users = np.array([s.user for s in sequences], dtype=np.int64)
    for i, s in enumerate(sequences):
        n = len(s)
        locs[i, :n], cats[i, :n], acts[i, :n], slots[i, :n] = s.locations, s.categories, s.activities, s.slots
        mask[i, :n] = True
        if n > 1:
            t_loc[i, : n - 1] = s.locations[1:]
            t_cat[i, : n - 1] = s.categories[1:]
            t_act[i, : n - 1] = s.activities[1:]
            t_time[i, : n - 1] = (s.slots[1:] + 0.5) / SLOTS_PER_DAY
            t_rain[i, : n - 1] = s.rainy[1:]
            t_cold[i, : n - 1] = s.cold[1:]
            if last_position_only:
                tmask[i, n - 2] = True
            else:
                tmask[i, : n - 1] = True
    return Batch(users, locs, cats, acts, slots, mask, t_loc, t_cat, t_act, t_time, tmask, t_rain, t_cold)


@dataclass
class FusedRepresentations:
    location: Tensor          # blended location table
    category: Tensor
    activity: Tensor
    image: Tensor | None      # blended image table
    image_raw: Tensor | None  # summed projected image features
    mixed: Tensor
    gate: Tensor | None


class M3ob(Module):
    """Multi-modal next-location model.

    ``sizes`` holds vocabulary sizes (users, locations, categories,
    activities); ``graphs`` maps level name to a normalised relational graph.
    Ablation switches come from ``cfg["ablation"]`` with the cascade applied.
    """

    def __init__(
        self,
        sizes: dict[str, int],
        cfg: dict,
        kg: KGEmbeddings,
        graphs: dict[str, RelationalGraph] | None,
        images: ImageFeatureSet | None,
        seed: int | None = None,
    ):
        self.sizes = dict(sizes)
        self.cfg = cfg
        self.flags = effective_flags(cfg)
        mc = cfg["model"]
        d = mc["dim"]
        if kg.dim != d:
            raise ValueError(f"knowledge-graph dim {kg.dim} differs from model.dim {d}")
        ks = kg.sizes
        if (ks.users, ks.locations, ks.categories, ks.activities) != (
            sizes["users"], sizes["locations"], sizes["categories"], sizes["activities"]
        ):
            raise ValueError("knowledge-graph entity counts do not match the dataset vocabulary")
        if self.flags["strg"] and not graphs:
            raise ValueError("relational graphs are required unless ablation.strg is off")
        if self.flags["img"] and images is None:
            raise ValueError("image features are required unless ablation.img is off")

        self.rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
        rng = self.rng
        self.dim = d
        self.alpha = float(cfg["fusion"]["alpha"])
        self.activation = cfg["graph"]["activation"]
        self.kg_sizes = ks
        trainable_kg = not (kg.frozen and mc.get("freeze_kg", True))
        self.kg_entity = Tensor(np.array(kg.entity), requires_grad=trainable_kg)
        self.kg_relation = Tensor(np.array(kg.relation), requires_grad=trainable_kg)
        self.graphs = graphs or {}

        n_u, n_p, n_c, n_a = sizes["users"], sizes["locations"], sizes["categories"], sizes["activities"]
        self.loc_emb = Tensor(rng.normal(0, 0.1, size=(n_p, d)), requires_grad=True)
        self.cat_emb = Tensor(rng.normal(0, 0.1, size=(n_c, d)), requires_grad=True)
        self.act_emb = Tensor(rng.normal(0, 0.1, size=(n_a, d)), requires_grad=True)
        self.user_emb = Tensor(rng.normal(0, 0.1, size=(n_u, d)), requires_grad=True)

        depth = cfg["graph"]["gcn_layers"]
        self.gcn = {
            level: [Tensor(glorot(rng, d, d), requires_grad=True) for _ in range(depth)]
            for level in ("location", "category", "activity", "image")
        }

        self.scales = list(cfg["image"]["scales"])
        if images is not None:
            self.image_raw = {s: ad.constant(np.array(images.features[s])) for s in self.scales}
            d_img = images.dim
        else:
            self.image_raw = {}
            d_img = 1
        proj_layers = cfg["image"]["proj_layers"]
        self.proj = {
            s: (Linear(d_img, d, rng) if proj_layers == 1 else MLP([d_img] + [d] * proj_layers, rng))
            for s in self.scales
        }
        self.gate = Linear(2 * d, d, rng)
        self.proj_kg = Linear(d, d, rng)

        d_t = mc["time_dim"]
        self.time2vec = Time2Vec(d_t, rng)
        self.f_loc = MLP([2 * d, d, d], rng)
        ctx_in = (2 * d + d_t) if self.flags["text"] else d_t
        self.f_ctx = MLP([ctx_in, d, d], rng)

        self.record_dim = (4 if self.flags["img"] else 3) * d
        ff = mc["ff_dim"] or 2 * self.record_dim
        self.encoder = CausalTransformer(
            self.record_dim, mc["layers"], mc["heads"], ff, mc["dropout"], mc["max_seq_len"], rng
        )
        self.heads = PredictionHeads(self.record_dim, d, n_p, n_c, n_a, rng)

    # ------------------------------------------------------------------
    def representations(self) -> FusedRepresentations:
        f = self.flags
        act = self.activation
        if f["strg"]:
            z_fp = gcn_propagate(self.graphs["location"], self.loc_emb, self.gcn["location"], act)
            cat = residual_update(gcn_propagate(self.graphs["category"], self.cat_emb, self.gcn["category"], act), self.cat_emb)
            acty = residual_update(gcn_propagate(self.graphs["activity"], self.act_emb, self.gcn["activity"], act), self.act_emb)
        else:
            z_fp, cat, acty = self.loc_emb, self.cat_emb, self.act_emb
        if f["img"]:
            z_img = project_and_sum(self.image_raw, self.proj, self.scales)
            graph = self.graphs["location"] if f["irg"] else None
            z_fi = image_graph_propagate(graph, z_img, self.gcn["image"], act)
            mixed, gate = gated_fuse(z_fp, z_fi, self.gate)
            loc_hat, img_hat = residual_blend(mixed, self.loc_emb, z_img, self.alpha)
        else:
            z_img = img_hat = gate = None
            mixed = z_fp
            loc_hat = self.alpha * mixed + (1.0 - self.alpha) * self.loc_emb
        return FusedRepresentations(loc_hat, cat, acty, img_hat, z_img, mixed, gate)

    def record_embeddings(self, batch: Batch, reps: FusedRepresentations) -> Tensor:
        f = self.flags
        B, T = batch.locations.shape
        users = np.broadcast_to(batch.users[:, None], (B, T))
        z_loc = ad.take(reps.location, batch.locations)
        z_user = ad.take(self.user_emb, users)
        z_time = self.time2vec(batch.slots / SLOTS_PER_DAY)
        if f["text"]:
            ctx = [ad.take(reps.category, batch.categories), ad.take(reps.activity, batch.activities), z_time]
            levels = ("location", "category", "activity")
        else:
            ctx = [z_time]
            levels = ("location",)
        if f["mup"]:
            pref = user_preference_batch(
                self.kg_entity, self.kg_relation, self.kg_sizes,
                users, batch.slots, batch.locations, batch.categories, batch.activities, levels,
            )
        else:
            pref = ad.constant(np.zeros((B, T, self.dim)))
        z_img = ad.take(reps.image, batch.locations) if f["img"] else None
        return build_record_embedding(self.f_loc, self.f_ctx, z_loc, z_user, ctx, pref, z_img)

    def forward(self, batch: Batch, reps: FusedRepresentations | None = None) -> HeadOutputs:
        reps = reps if reps is not None else self.representations()
        z = self.record_embeddings(batch, reps)
        h = self.encoder(z, batch.mask)
        return self.heads(h)

    __call__ = forward

    def kg_projection(self) -> Tensor:
        off = self.kg_sizes.offset("location")
        ent_p = ad.take(self.kg_entity, np.arange(off, off + self.sizes["locations"]))
        return self.proj_kg(ent_p)

    def location_scores(self, batch: Batch) -> np.ndarray:
        """Next-location logits (B, T, N_p) in evaluation mode."""
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                out = self.forward(batch).location.data
        finally:
            self.train(was)
        return out
