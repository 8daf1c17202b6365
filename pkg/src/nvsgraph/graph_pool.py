"""Cluster max pooling over spatial cells of an event graph."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import DiffArray
from .graph_build import EventGraph, pseudo_coords


@dataclass(frozen=True)
class PoolParams:
    """Cluster size (rows, columns).

    By default the size counts cells of the incoming graph, so the extent
    shrinks to ``(ceil(H'/s_h), ceil(W'/s_w))``. With ``absolute=True`` the size
    is in sensor pixels and the extent becomes ``ceil(sensor / size)``.
    """

    s_h: int
    s_w: int
    absolute: bool = False

    def __post_init__(self) -> None:
        if self.s_h < 1 or self.s_w < 1:
            raise ValueError("cluster sizes must be >= 1")

    def target(self, graph: EventGraph) -> tuple[tuple[float, float], tuple[int, int]]:
        """Pixel cell size and extent after pooling ``graph``."""
        if self.absolute:
            cell = (float(self.s_h), float(self.s_w))
            extent = (math.ceil(graph.sensor[0] / self.s_h), math.ceil(graph.sensor[1] / self.s_w))
        else:
            cell = (graph.cell[0] * self.s_h, graph.cell[1] * self.s_w)
            extent = (math.ceil(graph.extent[0] / self.s_h), math.ceil(graph.extent[1] / self.s_w))
        return cell, extent


@dataclass
class PoolStructure:
    """Coordinate-only part of a pooling step, reusable for any features on the same graph."""

    cluster: np.ndarray  # fine node -> coarse node
    coarse: EventGraph


def pool_structure(graph: EventGraph, params: PoolParams) -> PoolStructure:
    key = ("pool", params)
    cached = graph._cache.get(key)
    if cached is not None:
        return cached
    cell, extent = params.target(graph)
    row = np.floor(graph.pos[:, 1] / cell[0]).astype(np.int64)
    col = np.floor(graph.pos[:, 0] / cell[1]).astype(np.int64)
    if graph.num_nodes and ((row < 0).any() or (col < 0).any() or (row >= extent[0]).any() or (col >= extent[1]).any()):
        raise ValueError(f"node coordinates fall outside the pooled extent {extent}")
    key_flat = (graph.batch * extent[0] + row) * extent[1] + col
    uniq, cluster = np.unique(key_flat, return_inverse=True)
    cluster = cluster.reshape(-1)
    n_coarse = len(uniq)
    counts = np.bincount(cluster, minlength=n_coarse).astype(np.float64)
    pos = np.stack([np.bincount(cluster, weights=graph.pos[:, a], minlength=n_coarse) for a in range(3)],
                   axis=1).astype(np.float64)
    pos /= np.maximum(counts, 1.0)[:, None]
    batch = uniq // (extent[0] * extent[1])
    src, dst = cluster[graph.edge_index[0]], cluster[graph.edge_index[1]]
    cross = src != dst
    pairs = np.unique(np.stack([src[cross], dst[cross]], axis=1), axis=0).reshape(-1, 2)
    edge_index = pairs.T.copy()
    coarse = EventGraph(
        pos=pos,
        features=np.zeros((n_coarse, 0)),
        edge_index=edge_index,
        pseudo=pseudo_coords(pos, edge_index, batch, graph.num_graphs),
        extent=extent,
        sensor=graph.sensor,
        cell=cell,
        batch=batch,
        num_graphs=graph.num_graphs,
    )
    out = PoolStructure(cluster=cluster, coarse=coarse)
    graph._cache[key] = out
    return out


def max_pool_graph(graph: EventGraph, features: DiffArray, params: PoolParams) -> tuple[EventGraph, DiffArray]:
    """Coarse graph (mean coordinates, inter-cluster edges) and per-channel max features."""
    features = de.as_diff(features)
    if features.shape[0] != graph.num_nodes:
        raise ValueError(f"{features.shape[0]} feature rows for {graph.num_nodes} nodes")
    st = pool_structure(graph, params)
    pooled = de.scatter_max(features, st.cluster, st.coarse.num_nodes)
    return st.coarse, pooled
