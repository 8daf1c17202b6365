"""Networks assembled from a :class:`ModelConfig`: graph spatial stack plus object or action head."""

from __future__ import annotations

import math

import numpy as np

from . import diffengine as de
from .cnn3d import TemporalNet
from .config import LayerSpec, ModelConfig
from .diffengine import DiffArray
from .gnn import GConv, GraphFC, ResidualGraphBlock
from .graph2grid import graphs_to_grids
from .graph_build import EventGraph
from .graph_pool import PoolParams, max_pool_graph
from .layers import Linear, Module, dropout


def pool_params(spec: LayerSpec) -> PoolParams:
    if spec.size is not None:
        return PoolParams(spec.size[0], spec.size[1])
    return PoolParams(spec.cell[0], spec.cell[1], absolute=True)


def trace_extents(cfg: ModelConfig) -> list[tuple[int, int]]:
    """Grid extent after every pooling stage, starting from the sensor."""
    extent = tuple(cfg.sensor)
    out = []
    for spec in cfg.spatial:
        if spec.kind != "pool":
            continue
        if spec.size is not None:
            extent = (math.ceil(extent[0] / spec.size[0]), math.ceil(extent[1] / spec.size[1]))
        else:
            extent = (math.ceil(cfg.sensor[0] / spec.cell[0]), math.ceil(cfg.sensor[1] / spec.cell[1]))
        out.append(extent)
    return out


def final_extent(cfg: ModelConfig) -> tuple[int, int]:
    ext = trace_extents(cfg)
    return ext[-1] if ext else tuple(cfg.sensor)


class SpatialNet(Module):
    """Graph conv / residual / pooling stack; returns the coarsest graph and its features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.specs = list(cfg.spatial)
        layers: list[Module] = []
        c = 1
        for spec in self.specs:
            if spec.kind == "conv":
                layers.append(GConv(c, cfg.channels(spec.out), rng, cfg.kernel_size, cfg.degree))
                c = cfg.channels(spec.out)
            elif spec.kind == "res":
                layers.append(ResidualGraphBlock(c, cfg.channels(spec.out), rng, cfg.kernel_size, cfg.degree))
                c = cfg.channels(spec.out)
        self.layers = layers
        self.pools = [pool_params(s) for s in self.specs if s.kind == "pool"]
        self.out_channels = c

    def forward(self, graph: EventGraph) -> tuple[EventGraph, DiffArray]:
        x = DiffArray(graph.features)
        layers = iter(self.layers)
        pools = iter(self.pools)
        for spec in self.specs:
            if spec.kind == "pool":
                graph, x = max_pool_graph(graph, x, next(pools))
            else:
                x = next(layers)(graph, x)
        return graph, x


class ObjectNet(Module):
    """Spatial stack, graph FC over the final cell layout, hidden FCs with dropout after the first, FC(Q)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.spatial = SpatialNet(cfg, rng)
        h, w = final_extent(cfg)
        widths = [cfg.channels(f) for f in cfg.fc]
        if not widths:
            raise ValueError("the object head needs at least one hidden FC layer")
        self.graph_fc = GraphFC(h * w, self.spatial.out_channels, widths[0], rng)
        self.hidden = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.classifier = Linear(widths[-1], cfg.num_classes, rng)
        self.dropout_p = cfg.train.dropout_p
        self.dropout_rng = np.random.default_rng(cfg.train.rng_seed)

    def forward(self, graph: EventGraph) -> DiffArray:
        """Logits (num_graphs, Q) for a packed batch of single-graph samples."""
        coarse, x = self.spatial(graph)
        if coarse.extent != final_extent(self.cfg):
            raise ValueError(f"final extent {coarse.extent} differs from configured {final_extent(self.cfg)}")
        x = self.graph_fc(coarse, x)
        x = dropout(x, self.dropout_p, self.dropout_rng, self.training)
        for layer in self.hidden:
            x = de.relu(layer(x))
        return self.classifier(x)


class ActionNet(Module):
    """Spatial stack on every graph, Graph2Grid per graph, stacked along time, then the 3D head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.s_count = cfg.s_count
        self.spatial = SpatialNet(cfg, rng)
        self.temporal = TemporalNet(cfg.temporal, cfg.num_classes, rng, self.spatial.out_channels, cfg.width)

    def clips(self, graph: EventGraph) -> DiffArray:
        """(B, H, W, C, S) clips; graph ids in ``graph`` are sample-major (b * S + s)."""
        if graph.num_graphs % self.s_count:
            raise ValueError(f"{graph.num_graphs} graphs do not split into samples of S={self.s_count}")
        coarse, x = self.spatial(graph)
        grids = graphs_to_grids(coarse, x)  # (B*S, H, W, C)
        b = graph.num_graphs // self.s_count
        _, h, w, c = grids.shape
        return de.transpose(de.reshape(grids, (b, self.s_count, h, w, c)), (0, 2, 3, 4, 1))

    def forward(self, graph: EventGraph) -> DiffArray:
        return self.temporal(self.clips(graph))


def build_model(cfg: ModelConfig, seed: int | None = None) -> Module:
    rng = np.random.default_rng(cfg.train.rng_seed if seed is None else seed)
    return ObjectNet(cfg, rng) if cfg.task == "object" else ActionNet(cfg, rng)
