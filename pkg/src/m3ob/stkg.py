"""Hierarchical spatial-temporal knowledge graph: triplet extraction and TransE."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SLOTS_PER_DAY, EncodedSequence

ENTITY_KINDS = ("user", "location", "category", "activity")
LEVELS = ("location", "category", "activity")
N_RELATIONS = 1 + SLOTS_PER_DAY + len(LEVELS)


class EntityId(NamedTuple):
    kind: str
    index: int

    def __str__(self) -> str:
        return f"{self.kind}:{self.index}"


class RelationId(NamedTuple):
    """``kind`` is functional, visit or transition; ``arg`` is the slot or the level."""

    kind: str
    arg: int | str | None = None

    @property
    def index(self) -> int:
        if self.kind == "functional":
            return 0
        if self.kind == "visit":
            return 1 + int(self.arg)
        return 1 + SLOTS_PER_DAY + LEVELS.index(self.arg)

    @classmethod
    def from_index(cls, i: int) -> "RelationId":
        if i == 0:
            return FUNCTIONAL
        if 1 <= i <= SLOTS_PER_DAY:
            return cls("visit", i - 1)
        return cls("transition", LEVELS[i - 1 - SLOTS_PER_DAY])

    def __str__(self) -> str:
        return self.kind if self.arg is None else f"{self.kind}:{self.arg}"


FUNCTIONAL = RelationId("functional")


def visit(slot: int) -> RelationId:
    return RelationId("visit", int(slot))


def transition(level: str) -> RelationId:
    return RelationId("transition", level)


class Triplet(NamedTuple):
    head: EntityId
    relation: RelationId
    tail: EntityId


@dataclass(frozen=True)
class EntitySizes:
    users: int
    locations: int
    categories: int
    activities: int

    def count(self, kind: str) -> int:
        return {"user": self.users, "location": self.locations, "category": self.categories, "activity": self.activities}[kind]

    def offset(self, kind: str) -> int:
        off = 0
        for k in ENTITY_KINDS:
            if k == kind:
                return off
            off += self.count(k)
        raise KeyError(kind)

    @property
    def total(self) -> int:
        return self.users + self.locations + self.categories + self.activities

    def flat(self, e: EntityId) -> int:
        if not 0 <= e.index < self.count(e.kind):
            raise IndexError(f"{e} out of range ({self.count(e.kind)} {e.kind} entities)")
        return self.offset(e.kind) + e.index


def check_triplet(t: Triplet) -> bool:
    """Kind compatibility of a triplet with its relation."""
    h, r, tl = t
    if r.kind == "functional":
        return (h.kind, tl.kind) in {("location", "category"), ("category", "activity")}
    if r.kind == "visit":
        return h.kind == "user" and tl.kind in LEVELS and 0 <= int(r.arg) < SLOTS_PER_DAY
    if r.kind == "transition":
        return h.kind == tl.kind == r.arg
    return False


def extract_triplets(
    sequences: Iterable[EncodedSequence],
    location_category: np.ndarray,
    category_activity: np.ndarray,
) -> Counter:
    """Triplet multiset from training sequences (occurrence counts kept)."""
    counts: Counter = Counter()
    n_c = len(category_activity)
    for seq in sequences:
        u = EntityId("user", int(seq.user))
        for i, (p, s) in enumerate(zip(seq.locations, seq.slots)):
            p = int(p)
            if not 0 <= p < len(location_category):
                raise ValueError(f"location {p} has no category")
            c = int(location_category[p])
            if not 0 <= c < n_c:
                raise ValueError(f"category {c} has no activity")
            a = int(category_activity[c])
            counts[Triplet(EntityId("location", p), FUNCTIONAL, EntityId("category", c))] += 1
            counts[Triplet(EntityId("category", c), FUNCTIONAL, EntityId("activity", a))] += 1
            rel = visit(int(s))
            counts[Triplet(u, rel, EntityId("location", p))] += 1
            counts[Triplet(u, rel, EntityId("category", c))] += 1
            counts[Triplet(u, rel, EntityId("activity", a))] += 1
            if i + 1 < len(seq.locations):
                q = int(seq.locations[i + 1])
                c2 = int(location_category[q])
                a2 = int(category_activity[c2])
                counts[Triplet(EntityId("location", p), transition("location"), EntityId("location", q))] += 1
                counts[Triplet(EntityId("category", c), transition("category"), EntityId("category", c2))] += 1
                counts[Triplet(EntityId("activity", a), transition("activity"), EntityId("activity", a2))] += 1
    return counts


def write_triplets(path: str | Path, triplets: Counter) -> None:
    rows = sorted(triplets.items(), key=lambda kv: (kv[0].relation.index, kv[0].head, kv[0].tail))
    lines = [f"{h}\t{r}\t{t}\t{n}" for (h, r, t), n in rows]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_triplets(path: str | Path) -> Counter:
    out: Counter = Counter()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        h, r, t, n = line.split("\t")
        hk, hi = h.split(":")
        tk, ti = t.split(":")
        if ":" in r:
            rk, ra = r.split(":")
            rel = RelationId(rk, int(ra) if rk == "visit" else ra)
        else:
            rel = RelationId(r)
        out[Triplet(EntityId(hk, int(hi)), rel, EntityId(tk, int(ti)))] = int(n)
    return out


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class KGEmbeddings:
    sizes: EntitySizes
    entity: np.ndarray
    relation: np.ndarray
    frozen: bool = False
    loss_history: tuple[float, ...] = ()

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    def vector(self, e: EntityId) -> np.ndarray:
        return self.entity[self.sizes.flat(e)]

    def relation_vector(self, r: RelationId) -> np.ndarray:
        return self.relation[r.index]

    def table(self, kind: str) -> np.ndarray:
        off = self.sizes.offset(kind)
        return self.entity[off : off + self.sizes.count(kind)]

    def arrays(self) -> dict[str, np.ndarray]:
        s = self.sizes
        return {
            "kg.entity": self.entity,
            "kg.relation": self.relation,
            "kg.sizes": np.array([s.users, s.locations, s.categories, s.activities], dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], frozen: bool = True) -> "KGEmbeddings":
        s = [int(v) for v in arrays["kg.sizes"]]
        emb = cls(EntitySizes(*s), np.array(arrays["kg.entity"]), np.array(arrays["kg.relation"]))
        return freeze(emb) if frozen else emb


def freeze(emb: KGEmbeddings) -> KGEmbeddings:
    """Mark tables frozen and read-only; idempotent."""
    if emb.frozen:
        return emb
    entity = emb.entity.copy()
    relation = emb.relation.copy()
    entity.flags.writeable = False
    relation.flags.writeable = False
    return replace(emb, entity=entity, relation=relation, frozen=True)


def transe_energy(h: EntityId, r: RelationId, t: EntityId, emb: KGEmbeddings) -> float:
    """L2 translation distance ||ent_h + rel_r - ent_t||."""
    return float(np.linalg.norm(emb.vector(h) + emb.relation_vector(r) - emb.vector(t)))


@dataclass(frozen=True)
class TransEConfig:
    dim: int = 64
    margin: float = 1.0
    epochs: int = 50
    lr: float = 0.01
    neg_per_pos: int = 1
    batch_size: int = 512
    seed: int = 0


def _index_arrays(triplets: Counter, sizes: EntitySizes):
    items = sorted(triplets.items(), key=lambda kv: (kv[0].relation.index, kv[0].head, kv[0].tail))
    heads = np.array([sizes.flat(t.head) for t, _ in items], dtype=np.int64)
    rels = np.array([t.relation.index for t, _ in items], dtype=np.int64)
    tails = np.array([sizes.flat(t.tail) for t, _ in items], dtype=np.int64)
    counts = np.array([n for _, n in items], dtype=np.int64)
    head_kind = np.array([ENTITY_KINDS.index(t.head.kind) for t, _ in items], dtype=np.int64)
    tail_kind = np.array([ENTITY_KINDS.index(t.tail.kind) for t, _ in items], dtype=np.int64)
    return heads, rels, tails, counts, head_kind, tail_kind


def _corrupt(heads, tails, head_kind, tail_kind, sizes: EntitySizes, rng):
    """Replace head or tail (coin flip) with a uniform entity of the same kind."""
    offsets = np.array([sizes.offset(k) for k in ENTITY_KINDS])
    counts = np.array([sizes.count(k) for k in ENTITY_KINDS])
    flip = rng.random(len(heads)) < 0.5
    kind = np.where(flip, head_kind, tail_kind)
    repl = offsets[kind] + (rng.random(len(heads)) * counts[kind]).astype(np.int64)
    return np.where(flip, repl, heads), np.where(flip, tails, repl)


def margin_loss(
    entity: Tensor, relation: Tensor, pos: tuple[np.ndarray, ...], neg: tuple[np.ndarray, ...], margin: float
) -> Tensor:
    """Sum over pairs of max(0, margin + E(pos) - E(neg))."""
    ph, pr, pt = pos
    nh, nr, nt = neg
    e_pos = ad.l2norm(ad.take(entity, ph) + ad.take(relation, pr) - ad.take(entity, pt))
    e_neg = ad.l2norm(ad.take(entity, nh) + ad.take(relation, nr) - ad.take(entity, nt))
    return ad.relu(e_pos - e_neg + margin).sum()


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def init_embeddings(sizes: EntitySizes, dim: int, rng: np.random.Generator) -> KGEmbeddings:
    bound = 6.0 / np.sqrt(dim)
    entity = _unit_rows(rng.uniform(-bound, bound, size=(sizes.total, dim)))
    relation = _unit_rows(rng.uniform(-bound, bound, size=(N_RELATIONS, dim)))
    return KGEmbeddings(sizes, entity, relation)


def transe_train(triplets: Counter, sizes: EntitySizes, config: TransEConfig = TransEConfig()) -> KGEmbeddings:
    """SGD on the margin ranking loss; entities renormalised to unit length after every step.

    Each epoch visits every triplet occurrence once (duplicates train with
    their multiplicity).  The recorded loss is the mean hinge per positive.
    """
    if not triplets:
        raise ValueError("cannot train TransE on an empty triplet set")
    for t in triplets:
        if not check_triplet(t):
            raise ValueError(f"incompatible triplet {t}")
    rng = np.random.default_rng(config.seed)
    emb = init_embeddings(sizes, config.dim, rng)
    used = {t.relation.index for t in triplets}
    unused = [str(RelationId.from_index(i)) for i in range(N_RELATIONS) if i not in used]
    if unused:
        warnings.warn(f"{len(unused)} relation(s) have no triplets and keep their initial vectors", stacklevel=2)

    heads, rels, tails, counts, head_kind, tail_kind = _index_arrays(triplets, sizes)
    occurrence = np.repeat(np.arange(len(heads)), counts)
    entity = Tensor(emb.entity.copy(), requires_grad=True)
    relation = Tensor(emb.relation.copy(), requires_grad=True)
    history = []
    for _ in range(config.epochs):
        order = occurrence[rng.permutation(len(occurrence))]
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.repeat(order[start : start + config.batch_size], config.neg_per_pos)
            nh, nt = _corrupt(heads[idx], tails[idx], head_kind[idx], tail_kind[idx], sizes, rng)
            entity.grad = relation.grad = None
            ad.reset_tape()
            loss = margin_loss(entity, relation, (heads[idx], rels[idx], tails[idx]), (nh, rels[idx], nt), config.margin)
            ad.backward(loss, [entity, relation])
            entity.data -= config.lr * entity.grad
            relation.data -= config.lr * relation.grad
            entity.data = _unit_rows(entity.data)
            total += loss.item()
        history.append(total / (len(order) * config.neg_per_pos))
    return KGEmbeddings(sizes, entity.data, relation.data, loss_history=tuple(history))


def filtered_mean_rank(emb: KGEmbeddings, triplets: Iterable[Triplet]) -> float:
    """Mean rank of each true tail among same-kind candidates, other true tails filtered out."""
    triplets = list(dict.fromkeys(triplets))
    known: dict[tuple, set[int]] = {}
    for h, r, t in triplets:
        known.setdefault((h, r, t.kind), set()).add(t.index)
    ranks = []
    for h, r, t in triplets:
        cands = emb.table(t.kind)
        energy = np.linalg.norm(emb.vector(h) + emb.relation_vector(r) - cands, axis=1)
        others = np.ones(len(cands), dtype=bool)
        others[list(known[(h, r, t.kind)])] = False
        ranks.append(1 + int(np.sum(energy[others] < energy[t.index])))
    return float(np.mean(ranks))


def used_relations(triplets: Iterable[Triplet]) -> set[RelationId]:
    return {t.relation for t in triplets}


def triplet_arrays(triplets: Sequence[Triplet], sizes: EntitySizes):
    """Flat (head, relation, tail) index arrays for a list of triplets."""
    return (
        np.array([sizes.flat(t.head) for t in triplets], dtype=np.int64),
        np.array([t.relation.index for t in triplets], dtype=np.int64),
        np.array([sizes.flat(t.tail) for t in triplets], dtype=np.int64),
    )
