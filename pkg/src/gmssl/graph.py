"""Directed k-nearest-neighbour graphs over batch embeddings."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Graph:
    n: int
    edges: np.ndarray  # E x 2 int, (source, target), lexicographically sorted

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def num_edges(self):
        return len(self.edges)

    def edge_index(self):
        """n x n lookup: position of edge (i, j) in ``edges`` or -1."""
        idx = np.full((self.n, self.n), -1, dtype=np.int64)
        if len(self.edges):
            idx[self.edges[:, 0], self.edges[:, 1]] = np.arange(len(self.edges))
        return idx

    def out_degrees(self):
        return np.bincount(self.edges[:, 0], minlength=self.n) if len(self.edges) else np.zeros(self.n, int)


def pairwise_sq_dist(Z, metric="euclidean"):
    Z = np.asarray(Z, dtype=np.float64)
    if metric == "euclidean":
        diff = Z[:, None, :] - Z[None, :, :]
        return np.sum(diff * diff, axis=-1)
    if metric == "cosine":
        norms = np.linalg.norm(Z, axis=1)
        norms = np.where(norms > 0, norms, 1.0)
        U = Z / norms[:, None]
        return 1.0 - U @ U.T
    raise ValueError(f"unknown metric {metric!r}")


def knn_graph(Z, k, metric="euclidean"):
    """Edges i -> j for the k nearest rows j != i; distance ties go to the lower index."""
    Z = np.asarray(Z)
    n = Z.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must satisfy 1 <= k <= N-1 (N={n}), got {k}")
    d = pairwise_sq_dist(Z, metric)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    nbrs.sort(axis=1)
    edges = np.stack([np.repeat(np.arange(n), k), nbrs.ravel()], axis=1)
    return Graph(n, edges)


def cycle_graph(n):
    return Graph(n, np.array([[i, (i + 1) % n] for i in range(n)]) if n > 1 else np.empty((0, 2)))
