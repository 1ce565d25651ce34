"""Spatial-temporal relational graphs built from knowledge-graph similarity."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .stkg import KGEmbeddings, transition

DEFAULT_K = 20
K_SWEEP = (5, 10, 20, 50, 100)


@dataclass
class TransitionMatrix:
    level: str
    values: np.ndarray


@dataclass
class RelationalGraph:
    """Row-compressed weighted adjacency.

    ``row_max`` holds the per-row maximum of the kept weights (the diagonal
    normaliser).  ``normalized`` says whether ``matrix`` has been divided by it.
    """

    level: str
    matrix: sp.csr_matrix
    row_max: np.ndarray
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def share(self, level: str) -> "RelationalGraph":
        """Same structure and weights under another name (the image graph)."""
        return RelationalGraph(level, self.matrix.copy(), self.row_max.copy(), self.normalized)


def pairwise_similarity(emb: KGEmbeddings, level: str) -> TransitionMatrix:
    """M[i, j] = exp(-||ent_i + r_level - ent_j||), directional."""
    table = emb.table(level)
    if table.shape[0] == 0:
        raise ValueError(f"no {level} entities to compare")
    shifted = table + emb.relation_vector(transition(level))
    diff = shifted[:, None, :] - table[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return TransitionMatrix(level, np.exp(-dist))


def knn_sparsify(M: TransitionMatrix | np.ndarray, k: int, level: str | None = None) -> RelationalGraph:
    """Keep node i itself plus its k-1 most similar other nodes (ties: lower index).

    ``k`` larger than the node count keeps the whole row.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    values = M.values if isinstance(M, TransitionMatrix) else np.asarray(M, dtype=np.float64)
    level = level or (M.level if isinstance(M, TransitionMatrix) else "graph")
    n = values.shape[0]
    k = min(k, n)
    rows, cols, data = [], [], []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        # stable sort on -value keeps lower indices first among ties
        order = others[np.argsort(-values[i, others], kind="stable")][: k - 1]
        keep = np.sort(np.concatenate([[i], order]))
        rows.append(np.full(len(keep), i))
        cols.append(keep)
        data.append(values[i, keep])
    rows, cols, data = np.concatenate(rows), np.concatenate(cols), np.concatenate(data)
    matrix = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return RelationalGraph(level, matrix, _row_max(matrix))


def _row_max(matrix: sp.csr_matrix) -> np.ndarray:
    out = np.zeros(matrix.shape[0])
    for i in range(matrix.shape[0]):
        lo, hi = matrix.indptr[i], matrix.indptr[i + 1]
        if hi > lo:
            out[i] = matrix.data[lo:hi].max()
    return out


def row_max_normalize(G: RelationalGraph) -> RelationalGraph:
    """Divide each non-empty row by its maximum entry; empty rows stay empty."""
    if G.normalized:
        return G
    row_max = _row_max(G.matrix)
    scale = np.where(row_max > 0, 1.0 / np.where(row_max > 0, row_max, 1.0), 0.0)
    matrix = sp.csr_matrix(sp.diags(scale) @ G.matrix)
    matrix.sort_indices()
    return RelationalGraph(G.level, matrix, row_max, normalized=True)


def build_graph(emb: KGEmbeddings, level: str, k: int = DEFAULT_K) -> RelationalGraph:
    return row_max_normalize(knn_sparsify(pairwise_similarity(emb, level), k))


ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh, "identity": lambda x: x}


def gcn_propagate(
    G: RelationalGraph, Z: Tensor, W: Tensor | Sequence[Tensor], activation: str = "relu"
) -> Tensor:
    """sigma(D^-1 G Z W), repeated once per weight matrix in ``W``."""
    G = row_max_normalize(G)
    weights = [W] if isinstance(W, Tensor) else list(W)
    if Z.shape[0] != G.n:
        raise ShapeError(f"gcn_propagate: graph has {G.n} nodes but features have {Z.shape[0]} rows")
    act = ACTIVATIONS[activation]
    out = Z
    for w in weights:
        if w.shape[0] != out.shape[1]:
            raise ShapeError(f"gcn_propagate: features {out.shape} vs weight {w.shape}")
        out = act(ad.matmul(ad.spmm(G.matrix, out), w))
    return out


def residual_update(z_fusion: Tensor, z_base: Tensor) -> Tensor:
    if z_fusion.shape != z_base.shape:
        raise ShapeError(f"residual_update: {z_fusion.shape} vs {z_base.shape}")
    return z_fusion + z_base


def write_graphs(path: str | Path, graphs: Sequence[RelationalGraph]) -> None:
    lines = ["level\trow\tcol\tweight"]
    for G in graphs:
        coo = G.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            lines.append(f"{G.level}\t{coo.row[i]}\t{coo.col[i]}\t{coo.data[i]:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")
