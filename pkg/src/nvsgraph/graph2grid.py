"""Graph2Grid: dense frames from learned graphs, stacked along a temporal axis.

Grid index ``[a, b]`` is ``a = row = floor(y / cell_h)``, ``b = column =
floor(x / cell_w)``. Several nodes landing in one cell are merged by a
per-channel maximum; cells without nodes stay exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import DiffArray
from .gnn import grid_slots
from .graph_build import EventGraph

CLIP_MAGIC = b"CLP1"


def graphs_to_grids(graph: EventGraph, features: DiffArray) -> DiffArray:
    """(num_graphs, H, W, C) grids for a packed batch of graphs."""
    features = de.as_diff(features)
    h, w = graph.extent
    c = features.shape[1]
    grid = de.scatter_max(features, grid_slots(graph), graph.num_graphs * h * w)
    return de.reshape(grid, (graph.num_graphs, h, w, c))


def graph_to_grid(graph: EventGraph, features: DiffArray, extent: tuple[int, int] | None = None) -> DiffArray:
    """(H, W, C) grid of a single graph."""
    if graph.num_graphs != 1:
        raise ValueError("graph_to_grid takes a single graph; use graphs_to_grids for batches")
    if extent is not None and tuple(extent) != graph.extent:
        graph = replace(graph, extent=tuple(extent), _cache={})
    return de.reshape(graphs_to_grids(graph, features), graph.extent + (de.as_diff(features).shape[1],))


def stack_clip(grids) -> DiffArray:
    """Stack S grids of shape (H, W, C) into an (H, W, C, S) clip, temporal axis in input order."""
    grids = [de.as_diff(g) for g in grids]
    if not grids:
        raise ValueError("need at least one grid")
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape or g.ndim != 3:
            raise ValueError(f"grid shapes differ: {g.shape} vs {shape}")
    return de.stack(grids, axis=3)


def save_clip(clip, path) -> None:
    """Flat little-endian tensor: magic, u32 ndim, u32 dims, float64 values (row-major)."""
    data = np.ascontiguousarray(clip.data if isinstance(clip, DiffArray) else clip, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes())


def load_clip(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    return np.frombuffer(raw, dtype="<f8", offset=8 + 4 * ndim).reshape(dims).copy()
