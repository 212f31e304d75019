"""Hybrid spatial-feature KNN graph with Gaussian affinities and a
normalized adjacency operator, plus the compute/memory cost model.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError


@dataclass(frozen=True)
class GraphConfig:
    k: int = 24
    lambda_w: float = 0.7
    tau: float = 0.35
    normalization: str = "row"  # "row" | "symmetric"
    zscore_epsilon: float = 1e-12

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.lambda_w <= 1.0:
            raise ValueError("lambda_w must lie in [0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.normalization not in ("row", "symmetric"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class QualityGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) directed (src, dst), self-loops included
    affinity: np.ndarray  # (E,) weights in (0, 1]
    a_hat: sp.csr_matrix  # normalized adjacency operator


@dataclass(frozen=True)
class CostEstimate:
    message_ops: int
    transform_ops: int
    feature_memory: int
    edge_memory: int


def spatial_distances(layout):
    """Pairwise Euclidean distances between normalized patch centers."""
    pts = layout.centers_norm
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def feature_distances(features):
    """Cosine distances 1 - cos(h_i, h_j) between node embeddings."""
    h = features.matrix
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0.0):
        raise DataError("degenerate embedding: zero-norm row, cosine undefined")
    unit = h / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def zscore_offdiag(matrix, epsilon=1e-12):
    """Standardize a distance matrix over its off-diagonal entries only
    (population statistics); the diagonal stays zero. Degenerate inputs
    with std < epsilon collapse to the all-zero matrix.
    """
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    if n < 2:
        return np.zeros_like(m)
    off = ~np.eye(n, dtype=bool)
    vals = m[off]
    std = vals.std()
    if std < epsilon:
        return np.zeros_like(m)
    out = np.zeros_like(m)
    out[off] = (vals - vals.mean()) / std
    return out


def hybrid_distance(sp_z, ft_z, lambda_w):
    """Blend z-scored spatial and feature distances; lambda_w -> 1 favors space."""
    return lambda_w * sp_z + (1.0 - lambda_w) * ft_z


def knn_edges(d_hyb, k):
    """Directed edges from each node to its k nearest neighbors under d_hyb
    (ties to the smaller index), with self-loops appended for every node.
    """
    n = d_hyb.shape[0]
    if k >= n:
        raise DataError(f"k too large: k={k} needs at least {k + 1} nodes, have {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    edges = np.empty((n * k + n, 2), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        row = d_hyb[i]
        order = np.lexsort((idx, row))
        order = order[order != i][:k]
        edges[i * k : (i + 1) * k, 0] = i
        edges[i * k : (i + 1) * k, 1] = order
    edges[n * k :, 0] = idx
    edges[n * k :, 1] = idx
    return edges


def rbf_affinity(d, tau):
    """Heat-kernel weight exp(-d^2 / tau)."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return np.exp(-np.square(d) / tau)


def normalize_adjacency(edges, affinities, mode, n_nodes):
    """Normalized sparse adjacency: row mode divides each row by its sum,
    symmetric mode applies D^{-1/2} A D^{-1/2} with D the row-sum diagonal.
    Self-loops guarantee strictly positive row sums.
    """
    a = sp.csr_matrix(
        (affinities, (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes)
    )
    row_sums = np.asarray(a.sum(axis=1)).ravel()
    assert np.all(row_sums > 0.0), "zero row sum despite self-loops"
    if mode == "row":
        inv = sp.diags(1.0 / row_sums)
        return (inv @ a).tocsr()
    if mode == "symmetric":
        inv_sqrt = sp.diags(1.0 / np.sqrt(row_sums))
        return (inv_sqrt @ a @ inv_sqrt).tocsr()
    raise ValueError(f"unknown normalization {mode!r}")


def build_graph(layout, features, config):
    """Compose distances, z-scoring, KNN selection, RBF weighting, and
    normalization into a QualityGraph."""
    n = layout.n_patches
    if features.matrix.shape[0] != n:
        raise DataError(
            f"layout/features disagree on N: {n} vs {features.matrix.shape[0]}"
        )
    d_sp = zscore_offdiag(spatial_distances(layout), config.zscore_epsilon)
    d_ft = zscore_offdiag(feature_distances(features), config.zscore_epsilon)
    d_hyb = hybrid_distance(d_sp, d_ft, config.lambda_w)
    edges = knn_edges(d_hyb, config.k)
    affinity = rbf_affinity(d_hyb[edges[:, 0], edges[:, 1]], config.tau)
    # self-loop affinity is rbf(0) = 1; the loop entries of d_hyb are zero
    a_hat = normalize_adjacency(edges, affinity, config.normalization, n)
    return QualityGraph(n_nodes=n, edges=edges, affinity=affinity, a_hat=a_hat)


def estimate_cost(n_nodes, k, d, layers):
    """Operation and memory counts for the message-passing stage:
    aggregation costs N*k*d per layer, feature transforms N*d^2 per layer,
    features occupy N*d and edges N*k.
    """
    if min(n_nodes, k, d, layers) < 1:
        raise ValueError("all cost arguments must be >= 1")
    return CostEstimate(
        message_ops=layers * n_nodes * k * d,
        transform_ops=layers * n_nodes * d * d,
        feature_memory=n_nodes * d,
        edge_memory=n_nodes * k,
    )
