"""Symmetric-normalized user-item bipartite graph in CSR form."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, ShapeError


@dataclass(eq=False)
class BipartiteGraph:
    """Normalized interaction graph.

    ``user_adj`` is the |U| x |I| block R with entries 1/sqrt(deg(u) deg(i)),
    ``item_adj`` its transpose stored separately in CSR so both propagation
    directions are row-major. The full adjacency [[0, R], [R^T, 0]] is never
    materialized.
    """

    n_users: int
    n_items: int
    user_adj: sp.csr_matrix
    item_adj: sp.csr_matrix
    _cast: dict = field(default_factory=dict, repr=False)

    @property
    def n_edges(self) -> int:
        return self.user_adj.nnz

    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_adj.indptr)

    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_adj.indptr)

    def blocks(self, dtype) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        dtype = np.dtype(dtype)
        if dtype == self.user_adj.dtype:
            return self.user_adj, self.item_adj
        if dtype not in self._cast:
            self._cast[dtype] = (self.user_adj.astype(dtype), self.item_adj.astype(dtype))
        return self._cast[dtype]

    def dense(self) -> np.ndarray:
        """Full (|U|+|I|) square normalized adjacency; for small graphs and tests."""
        r = self.user_adj.toarray()
        n = self.n_users + self.n_items
        out = np.zeros((n, n))
        out[: self.n_users, self.n_users :] = r
        out[self.n_users :, : self.n_users] = r.T
        return out


def _as_pairs(interactions) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(interactions, "users") and hasattr(interactions, "items"):
        return np.asarray(interactions.users, dtype=np.int64), np.asarray(interactions.items, dtype=np.int64)
    arr = np.asarray(interactions, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def build_graph(interactions, n_users: int, n_items: int) -> BipartiteGraph:
    """Build the normalized graph; duplicate edges collapse to one.

    ``interactions`` is anything with ``users``/``items`` arrays, or a
    sequence of (user_idx, item_idx) pairs.
    """
    users, items = _as_pairs(interactions)
    for name, idx, bound in (("user", users, n_users), ("item", items, n_items)):
        bad = np.flatnonzero((idx < 0) | (idx >= bound))
        if len(bad):
            r = int(bad[0])
            raise BoundsError(
                f"interaction row {r}: {name} index {int(idx[r])} outside [0, {bound})"
            )

    adj = sp.csr_matrix(
        (np.ones(len(users)), (users, items)), shape=(n_users, n_items), dtype=np.float64
    )
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()

    du = np.diff(adj.indptr).astype(np.float64)
    di = np.bincount(adj.indices, minlength=n_items).astype(np.float64)
    rows = np.repeat(np.arange(n_users), np.diff(adj.indptr))
    adj.data = 1.0 / np.sqrt(du[rows] * di[adj.indices])

    item_adj = adj.T.tocsr()
    item_adj.sort_indices()
    return BipartiteGraph(n_users, n_items, adj, item_adj)


def propagate_once(graph: BipartiteGraph, user_emb: np.ndarray, item_emb: np.ndarray):
    """One hop of normalized neighbor aggregation in both directions."""
    if user_emb.shape[0] != graph.n_users or item_emb.shape[0] != graph.n_items:
        raise ShapeError(
            f"embedding rows ({user_emb.shape[0]}, {item_emb.shape[0]}) do not match "
            f"graph sizes ({graph.n_users}, {graph.n_items})"
        )
    if user_emb.ndim != 2 or item_emb.ndim != 2 or user_emb.shape[1] != item_emb.shape[1]:
        raise ShapeError(f"incompatible embedding shapes {user_emb.shape} and {item_emb.shape}")
    dtype = np.result_type(user_emb.dtype, item_emb.dtype)
    r, rt = graph.blocks(dtype)
    return np.asarray(r @ item_emb, dtype=dtype), np.asarray(rt @ user_emb, dtype=dtype)
