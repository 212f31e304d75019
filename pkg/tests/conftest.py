import numpy as np
import pytest

from graph_iqa import encoder, graph
from graph_iqa.grid import PatchLayout


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def random_instance(rng, n, d=6):
    """Random layout + unit-scale features for graph tests."""
    layout = PatchLayout(centers_norm=rng.random((n, 2)))
    feats = encoder.NodeFeatures(matrix=rng.normal(size=(n, d)), d=d)
    return layout, feats


def brute_force_knn(d_hyb, k):
    """Independent KNN oracle: full sort per row with (value, index) keys."""
    n = d_hyb.shape[0]
    edges = []
    for i in range(n):
        ranked = sorted(
            (j for j in range(n) if j != i), key=lambda j: (d_hyb[i][j], j)
        )
        edges.extend((i, j) for j in ranked[:k])
    edges.extend((i, i) for i in range(n))
    return set(edges)


def dense_reference_graph(layout, feats, config):
    """Dense, loop-based re-derivation of the hybrid graph construction."""
    n = layout.n_patches
    pts = layout.centers_norm
    d_sp = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d_sp[i, j] = np.sqrt(((pts[i] - pts[j]) ** 2).sum())
    h = feats.matrix
    d_ft = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                d_ft[i, j] = 1.0 - h[i] @ h[j] / (
                    np.linalg.norm(h[i]) * np.linalg.norm(h[j])
                )
    d_ft = np.clip(d_ft, 0.0, 2.0)

    def zscore(m):
        off = [m[i][j] for i in range(n) for j in range(n) if i != j]
        mean = np.mean(off)
        std = np.std(off)
        if std < config.zscore_epsilon:
            return np.zeros_like(m)
        out = np.zeros_like(m)
        for i in range(n):
            for j in range(n):
                if i != j:
                    out[i, j] = (m[i, j] - mean) / std
        return out

    d_hyb = config.lambda_w * zscore(d_sp) + (1 - config.lambda_w) * zscore(d_ft)
    edges = brute_force_knn(d_hyb, config.k)
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = np.exp(-d_hyb[i, j] ** 2 / config.tau)
    deg = a.sum(axis=1)
    if config.normalization == "row":
        a_hat = a / deg[:, None]
    else:
        inv_sqrt = 1.0 / np.sqrt(deg)
        a_hat = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return edges, a_hat


def graph_edge_set(quality_graph):
    return {(int(s), int(t)) for s, t in quality_graph.edges}


def tiny_model_setup(rng, n=8, d_raw=5, d=4, layers=2, k=3, dropout=0.15):
    """Small random pipeline instance for model/gradient tests."""
    from graph_iqa import model

    layout = PatchLayout(centers_norm=rng.random((n, 2)))
    raw = encoder.RawFeatures(
        matrix=rng.normal(size=(n, d_raw)), d_raw=d_raw, source="builtin-stat"
    )
    proj = encoder.init_projection(d_raw, d, rng)
    cfg = model.ModelConfig(
        d=d, layers=layers, alpha=0.55, dropout_rate=dropout,
        gate_hidden=3, head_hidden=3,
    )
    params = model.init_model_params(cfg, rng)
    nodes = encoder.project(raw, proj)
    g = graph.build_graph(layout, nodes, graph.GraphConfig(k=k))
    return layout, raw, proj, cfg, params, nodes, g
