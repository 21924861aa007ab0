"""Patch affinity matrix and its thresholded adjacency graph.

The affinity of two patches is the dot product of their key feature
vectors; an unweighted edge exists wherever that dot product is strictly
positive. Self-loops are never emitted even though a patch's affinity with
itself is positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PatchGraph:
    """Undirected graph over patch indices plus the patch-grid geometry.

    Edges are stored once per unordered pair, keyed ``(u, v)`` with
    ``u < v``. Node ``i`` sits at grid cell ``(i // grid[1], i % grid[1])``.
    """

    n: int
    grid: tuple[int, int]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def total_weight(self) -> float:
        return float(sum(self.edges.values()))

    def neighbors(self) -> list[dict[int, float]]:
        """Adjacency as a list of node -> {neighbor: weight} dicts."""
        adj: list[dict[int, float]] = [{} for _ in range(self.n)]
        for (u, v), w in self.edges.items():
            adj[u][v] = w
            adj[v][u] = w
        return adj

    def degrees(self) -> np.ndarray:
        k = np.zeros(self.n, dtype=np.float64)
        for (u, v), w in self.edges.items():
            k[u] += w
            k[v] += w
        return k


def build_affinity(patch_features: np.ndarray) -> np.ndarray:
    """Pairwise dot-product affinity matrix of the patch feature rows.

    The product is mirrored from the upper triangle so the result is
    exactly symmetric.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    if feats.ndim != 2 or feats.size == 0:
        raise ValueError("patch features must be a non-empty N x d matrix")
    a = feats @ feats.T
    upper = np.triu(a)
    return upper + np.triu(a, 1).T


def threshold_adjacency(
    a: np.ndarray,
    grid: tuple[int, int],
    weighted: bool = False,
) -> PatchGraph:
    """Turn an affinity matrix into a graph with an edge where a[m][n] > 0.

    The diagonal is ignored (no self-loops). Edge weights are 1.0 unless
    ``weighted`` is set, in which case the raw positive affinity is kept.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("affinity matrix is not symmetric")
    n = a.shape[0]
    h_p, w_p = grid
    if h_p * w_p != n:
        raise ValueError(f"grid {h_p}x{w_p} inconsistent with {n} nodes")
    rows, cols = np.nonzero(np.triu(a, 1) > 0)
    if weighted:
        edges = {(int(u), int(v)): float(a[u, v]) for u, v in zip(rows, cols)}
    else:
        edges = {(int(u), int(v)): 1.0 for u, v in zip(rows, cols)}
    return PatchGraph(n=n, grid=(h_p, w_p), edges=edges)
