"""Bipartite CSR interaction graph.

Nodes share one id space: users are ``0..n-1`` and item ``i`` is node ``n + i``.
Row ``v`` of the combined CSR lists v's neighbors (global ids, ascending), so
user rows hold the forward user->item adjacency and item rows the reverse one.
"""

from __future__ import annotations

import numpy as np

from .data import ImplicitDataset


class InteractionGraph:
    def __init__(self, n: int, m: int, pairs):
        pairs = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
        if len(pairs) == 0:
            raise ValueError("cannot build a graph without interactions")
        if pairs.min() < 0 or pairs[:, 0].max() >= n or pairs[:, 1].max() >= m:
            raise ValueError("pair index out of range")
        self.n, self.m = int(n), int(m)
        self.num_edges = len(pairs)

        src = np.concatenate([pairs[:, 0], pairs[:, 1] + n])
        dst = np.concatenate([pairs[:, 1] + n, pairs[:, 0]])
        order = np.lexsort((dst, src))
        self.indices = dst[order]
        self.edge_src = src[order]
        self.indptr = np.zeros(n + m + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n + m), out=self.indptr[1:])
        self.degrees = np.diff(self.indptr)
        # row-major edge keys; sorted because rows and neighbor lists are sorted
        self._keys = self.edge_src * (n + m) + self.indices
        for a in (self.indices, self.edge_src, self.indptr, self.degrees, self._keys):
            a.setflags(write=False)

    @classmethod
    def build(cls, train: ImplicitDataset) -> "InteractionGraph":
        return cls(train.n, train.m, train.pairs)

    @property
    def num_nodes(self) -> int:
        return self.n + self.m

    def _check(self, node: int) -> None:
        if not 0 <= node < self.n + self.m:
            raise IndexError(f"node {node} out of range [0, {self.n + self.m})")

    def degree(self, node: int) -> int:
        self._check(node)
        return int(self.degrees[node])

    def neighbors(self, node: int) -> np.ndarray:
        """Sorted global neighbor ids of ``node`` (a read-only view)."""
        self._check(node)
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def user_items(self, u: int) -> np.ndarray:
        """Positive items of user ``u`` as item indices."""
        if not 0 <= u < self.n:
            raise IndexError(f"user {u} out of range")
        return self.neighbors(u) - self.n

    def item_users(self, i: int) -> np.ndarray:
        if not 0 <= i < self.m:
            raise IndexError(f"item {i} out of range")
        return self.neighbors(i + self.n)

    def has_edge(self, u, i):
        """Vectorized membership ``x(u, i)`` for user and item index arrays."""
        u = np.asarray(u, dtype=np.int64)
        target = np.asarray(i, dtype=np.int64) + self.n
        pos = np.searchsorted(self._keys, u * (self.n + self.m) + target)
        pos = np.minimum(pos, len(self._keys) - 1)
        out = (self.edge_src[pos] == u) & (self.indices[pos] == target)
        return bool(out) if out.ndim == 0 else out

    def user_degree_array(self) -> np.ndarray:
        return self.degrees[:self.n]

    def item_degree_array(self) -> np.ndarray:
        return self.degrees[self.n:]

    def pairs(self) -> np.ndarray:
        e = self.indptr[self.n]
        return np.stack([self.edge_src[:e], self.indices[:e] - self.n], axis=1)
