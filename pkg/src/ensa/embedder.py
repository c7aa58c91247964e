"""k-NN message passing that turns raw point features into hidden embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .balltree import PointCloud


@dataclass(frozen=True)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # n x k
    edge_vectors: np.ndarray  # n x k x 3, p_j - p_i


def build_knn_graph(cloud: PointCloud, k: int) -> KnnGraph:
    """Exact k nearest neighbours by brute force; ties go to the lower index."""
    n = cloud.n
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    pos = cloud.positions
    nbrs = np.empty((n, k), dtype=np.int64)
    block = max(1, (1 << 21) // n)
    for s in range(0, n, block):
        e = min(n, s + block)
        diff = pos[s:e, None, :] - pos[None, :, :]
        d2 = np.einsum("bnk,bnk->bn", diff, diff)
        d2[np.arange(e - s), np.arange(s, e)] = np.inf
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
        within = d2 <= kth
        exact = within.sum(axis=1) == k
        rows = np.flatnonzero(exact)
        cand = np.nonzero(within[rows])[1].reshape(-1, k)
        dist = np.take_along_axis(d2[rows], cand, axis=1)
        nbrs[s + rows] = np.take_along_axis(cand, np.argsort(dist, axis=1, kind="stable"), axis=1)
        # a tie straddling the k-th distance: full stable sort of that row
        for r in np.flatnonzero(~exact):
            nbrs[s + r] = np.argsort(d2[r], kind="stable")[:k]
    edges = pos[nbrs] - pos[:, None, :]
    return KnnGraph(k=k, neighbors=nbrs, edge_vectors=edges)


def init_embedder_params(store: dc.ParamStore, in_features: int, hidden: int, rng: np.random.Generator) -> None:
    for stage, fan_in in (("msg", in_features + 3), ("upd", in_features + hidden)):
        store.add(f"embed.{stage}.w1", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, hidden)))
        store.add(f"embed.{stage}.b1", np.zeros((1, hidden)))
        store.add(f"embed.{stage}.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)))
        store.add(f"embed.{stage}.b2", np.zeros((1, hidden)))


def mlp2(x: dc.Tensor, params: dc.ParamStore, prefix: str) -> dc.Tensor:
    h = dc.gelu(dc.add(dc.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return dc.add(dc.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def mpnn_embed(
    cloud: PointCloud,
    graph: KnnGraph,
    params: dc.ParamStore,
    features: dc.Tensor | None = None,
    bypass: bool = False,
) -> dc.Tensor:
    """One round of mean-aggregated message passing.

    ``features`` overrides ``cloud.features`` (pass a gradient-tracking leaf
    to differentiate with respect to inputs). With ``bypass`` the aggregate
    is replaced by zeros so each embedding depends on its own point only.
    """
    feats = features if features is not None else dc.constant(cloud.features)
    n, f = feats.shape
    w = params.values["embed.upd.w1"]
    hidden = params.values["embed.upd.w2"].shape[0]
    if w.shape[0] != f + hidden or params.values["embed.msg.w1"].shape[0] != f + 3:
        raise dc.ShapeError("mpnn_embed", feats.shape, w.shape, detail="feature width does not match embedder")
    if bypass:
        agg = dc.constant(np.zeros((n, hidden)))
    else:
        if graph.neighbors.shape[0] != n:
            raise dc.ShapeError("mpnn_embed", graph.neighbors.shape, feats.shape)
        k = graph.k
        src = dc.gather_rows(feats, graph.neighbors.reshape(-1))
        edges = dc.constant(graph.edge_vectors.reshape(n * k, 3))
        msg = mlp2(dc.concat_cols([src, edges]), params, "embed.msg")
        agg = dc.reduce_mean_rows(msg, k)
    return mlp2(dc.concat_cols([feats, agg]), params, "embed.upd")
