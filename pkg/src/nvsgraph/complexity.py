"""Closed-form FLOPs and parameter counts, and per-layer cost reports for configured models.

Graph layers are costed with measured mean node / edge counts per graph at
each pooling level (level 0 is the input graph, level k follows the k-th
pooling stage). Batch norm and pooling contribute parameters (gamma, beta)
or nothing, but no FLOPs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cnn3d import temporal_plan, trace_temporal
from .config import ModelConfig
from .models import final_extent


def flops_conv2d(h: int, w: int, c_in: int, k: int, c_out: int) -> int:
    return 2 * h * w * (c_in * k * k + 1) * c_out


def flops_gconv(n_edge: float, n_node: float, m: int, d: int, c_in: int, c_out: int) -> float:
    """Basis products per edge, scatter and bias terms: E(m+1)^d(3 C_in C_out + 7d) + (E + N) C_out."""
    return n_edge * (m + 1) ** d * (3 * c_in * c_out + 7 * d) + (n_edge + n_node) * c_out


def flops_fc(i: int, o: int) -> int:
    return (2 * i - 1) * o


def flops_conv3d(h: int, w: int, t: int, c_in: int, k: int, c_out: int) -> int:
    return 2 * h * w * t * (c_in * k**3 + 1) * c_out


def params_conv(c_in: int, k_elems: int, c_out: int) -> int:
    return (c_in * k_elems + 1) * c_out


def params_fc(c_in: int, c_out: int) -> int:
    return (c_in + 1) * c_out


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    flops: float
    params: int
    n_node: float | None = None
    n_edge: float | None = None


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_flops(self) -> float:
        return float(sum(r.flops for r in self.layers))

    @property
    def total_params(self) -> int:
        return int(sum(r.params for r in self.layers))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "flops", "params", "n_node", "n_edge"])
        for r in self.layers:
            writer.writerow([r.name, r.kind, repr(float(r.flops)), r.params,
                             "" if r.n_node is None else repr(float(r.n_node)),
                             "" if r.n_edge is None else repr(float(r.n_edge))])
        writer.writerow(["total", "", repr(self.total_flops), self.total_params, "", ""])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'layer':<28} {'kind':<8} {'MFLOPs':>14} {'params':>12}"]
        for r in self.layers:
            lines.append(f"{r.name:<28} {r.kind:<8} {r.flops / 1e6:>14.3f} {r.params:>12d}")
        lines.append(f"{'total':<28} {'':<8} {self.total_flops / 1e6:>14.3f} {self.total_params:>12d}")
        lines.append(f"GFLOPs {self.total_flops / 1e9:.4f}   size {self.total_params * 4 / 2**20:.2f} MB (float32)")
        return "\n".join(lines)


@dataclass(frozen=True)
class GraphStats:
    """Mean nodes and edges per graph at each pooling level."""

    n_node: tuple[float, ...]
    n_edge: tuple[float, ...]

    def level(self, k: int) -> tuple[float, float]:
        if k >= len(self.n_node):
            raise ValueError(f"statistics cover {len(self.n_node)} levels, level {k} requested")
        return self.n_node[k], self.n_edge[k]


def read_stats(path) -> GraphStats:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["stage"]))
    if not rows:
        raise ValueError(f"{path}: no statistics rows")
    if [int(r["stage"]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: stages must be 0..{len(rows) - 1}")
    return GraphStats(tuple(float(r["n_node"]) for r in rows), tuple(float(r["n_edge"]) for r in rows))


def write_stats(path, stats: GraphStats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "n_node", "n_edge"])
        for k, (n, e) in enumerate(zip(stats.n_node, stats.n_edge)):
            writer.writerow([k, repr(float(n)), repr(float(e))])


def measure_stats(graphs, cfg: ModelConfig) -> GraphStats:
    """Mean node / edge counts per graph at every level of ``cfg``'s pooling chain."""
    from .graph_pool import pool_structure
    from .models import pool_params

    pools = [pool_params(s) for s in cfg.spatial if s.kind == "pool"]
    nodes = np.zeros(len(pools) + 1)
    edges = np.zeros(len(pools) + 1)
    graphs = list(graphs)
    if not graphs:
        raise ValueError("no graphs to measure")
    for g in graphs:
        nodes[0] += g.num_nodes
        edges[0] += g.num_edges
        for k, p in enumerate(pools, start=1):
            g = pool_structure(g, p).coarse
            nodes[k] += g.num_nodes
            edges[k] += g.num_edges
    return GraphStats(tuple(nodes / len(graphs)), tuple(edges / len(graphs)))


def flops_gconv_kernel(n_edge: float, n_node: float, kernel_size, degree: int, c_in: int, c_out: int) -> float:
    """The gconv closed form with (m+1)^d replaced by the count of non-zero basis products.

    The two agree whenever every axis has more than ``degree`` bases; a
    single-basis axis (the 1x1 shortcut) contributes a factor of one.
    """
    d = len(kernel_size)
    bases = int(np.prod([min(degree, k - 1) + 1 for k in kernel_size]))
    return n_edge * bases * (3 * c_in * c_out + 7 * d) + (n_edge + n_node) * c_out


def report_model(cfg: ModelConfig, stats: GraphStats | None) -> CostReport:
    """Per-layer FLOPs and parameters of ``cfg``; action-model graph layers are counted S times."""
    if stats is None:
        raise ValueError("graph statistics are required to cost graph layers")
    rows: list[LayerCost] = []
    d = len(cfg.kernel_size)
    reps = cfg.s_count if cfg.task == "action" else 1

    def gconv(name, c_in, c_out, kernel, level):
        n, e = stats.level(level)
        fl = flops_gconv_kernel(e, n, kernel, cfg.degree, c_in, c_out)
        rows.append(LayerCost(name, "gconv", reps * fl, params_conv(c_in, int(np.prod(kernel)), c_out), n, e))
        rows.append(LayerCost(name + ".bn", "bn", 0.0, 2 * c_out))

    c = 1
    level = 0
    li = 0
    for spec in cfg.spatial:
        if spec.kind == "pool":
            level += 1
            n, e = stats.level(level)
            rows.append(LayerCost(f"pool{level}", "pool", 0.0, 0, n, e))
            continue
        c_out = cfg.channels(spec.out)
        if spec.kind == "conv":
            gconv(f"spatial.{li}", c, c_out, cfg.kernel_size, level)
        else:
            gconv(f"spatial.{li}.conv1", c, c_out, cfg.kernel_size, level)
            gconv(f"spatial.{li}.conv2", c_out, c_out, cfg.kernel_size, level)
            gconv(f"spatial.{li}.shortcut", c, c_out, (1,) * d, level)
        c = c_out
        li += 1

    h, w = final_extent(cfg)
    if cfg.task == "object":
        widths = [cfg.channels(f) for f in cfg.fc]
        slots = h * w
        rows.append(LayerCost("graph_fc", "fc", flops_fc(slots * c, widths[0]), slots * c * widths[0]))
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            rows.append(LayerCost(f"fc{i + 1}", "fc", flops_fc(a, b), params_fc(a, b)))
        rows.append(LayerCost("classifier", "fc", flops_fc(widths[-1], cfg.num_classes),
                              params_fc(widths[-1], cfg.num_classes)))
    else:
        plan = temporal_plan(cfg.temporal, c, cfg.width)
        for r in trace_temporal(plan, cfg.num_classes, h, w, cfg.s_count):
            if r["kind"] == "conv3d":
                hh, ww, tt, c_in = r["in"]
                c_out = r["out"][3]
                k = r["kernel"]
                rows.append(LayerCost("temporal." + r["layer"], "conv3d", flops_conv3d(hh, ww, tt, c_in, k, c_out),
                                      params_conv(c_in, k**3, c_out)))
                rows.append(LayerCost("temporal." + r["layer"] + ".bn", "bn", 0.0, 2 * c_out))
            elif r["kind"] == "fc":
                rows.append(LayerCost("temporal.fc", "fc", flops_fc(r["in"][0], r["out"][0]),
                                      params_fc(r["in"][0], r["out"][0])))
            else:
                rows.append(LayerCost("temporal." + r["layer"], r["kind"], 0.0, 0))
    return CostReport(rows)
