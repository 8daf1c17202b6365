"""Radius-neighbourhood event graphs and multi-graph segmentation of streams."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .event_io import Event, EventStream
from .sampling import SamplingParams, non_uniform_sample


@dataclass(frozen=True)
class GraphParams:
    radius: float = 3.0
    alpha: float = 1.0
    beta: float = 0.5e-5  # per microsecond squared
    d_max: int = 32
    t_vol: float = 1.0 / 30.0  # seconds

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.t_vol <= 0:
            raise ValueError("t_vol must be positive")

    @property
    def t_vol_us(self) -> int:
        return int(round(self.t_vol * 1e6))


@dataclass
class EventGraph:
    """Nodes, directed edges and edge pseudo-coordinates of one or more graphs.

    ``pos`` holds (x, y, t) per node in sensor pixels / microseconds. After
    pooling a node sits at the mean of its cluster and ``cell`` records the
    pixel size of one grid cell at the current level, so ``floor(y / cell[0])``
    and ``floor(x / cell[1])`` give the node's (row, column) inside ``extent``.

    An edge ``(i, j)`` in ``edge_index[:, e]`` means ``j`` is a neighbour of
    ``i``: node ``i`` aggregates from ``j``. Several graphs can be packed into
    one object; ``batch`` maps nodes to graph ids.
    """

    pos: np.ndarray
    features: np.ndarray
    edge_index: np.ndarray
    pseudo: np.ndarray
    extent: tuple[int, int]
    sensor: tuple[int, int]
    cell: tuple[float, float] = (1.0, 1.0)
    batch: np.ndarray | None = None
    num_graphs: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats if feats.ndim == 2 and len(feats) == len(self.pos) else feats.reshape(len(self.pos), -1)
        self.edge_index = np.asarray(self.edge_index, dtype=np.int64).reshape(2, -1)
        self.pseudo = np.asarray(self.pseudo, dtype=np.float64).reshape(-1, 2)
        self.extent = (int(self.extent[0]), int(self.extent[1]))
        self.sensor = (int(self.sensor[0]), int(self.sensor[1]))
        self.cell = (float(self.cell[0]), float(self.cell[1]))
        if self.batch is None:
            self.batch = np.zeros(len(self.pos), dtype=np.int64)
        else:
            self.batch = np.asarray(self.batch, dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return len(self.pos)

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[1]

    def cells(self) -> np.ndarray:
        """Integer (row, column) of every node at the current level."""
        row = np.floor(self.pos[:, 1] / self.cell[0]).astype(np.int64)
        col = np.floor(self.pos[:, 0] / self.cell[1]).astype(np.int64)
        return np.stack([row, col], axis=1)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.edge_index[0], minlength=self.num_nodes)

    def with_pos(self, pos: np.ndarray) -> "EventGraph":
        """Copy with new coordinates, same edges, pseudo-coordinates recomputed."""
        pos = np.asarray(pos, dtype=np.float64)
        return replace(self, pos=pos, pseudo=pseudo_coords(pos, self.edge_index, self.batch, self.num_graphs),
                       _cache={})


def batch_graphs(graphs: list[EventGraph]) -> EventGraph:
    """Pack graphs sharing extent and cell size into one disjoint union."""
    if not graphs:
        raise ValueError("cannot batch an empty list of graphs")
    first = graphs[0]
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    for g in graphs:
        if g.extent != first.extent or g.cell != first.cell or g.num_graphs != 1:
            raise ValueError("graphs must share extent and cell size and be unbatched")
    return EventGraph(
        pos=np.concatenate([g.pos for g in graphs]),
        features=np.concatenate([g.features for g in graphs]),
        edge_index=np.concatenate([g.edge_index + o for g, o in zip(graphs, offsets)], axis=1),
        pseudo=np.concatenate([g.pseudo for g in graphs]),
        extent=first.extent,
        sensor=first.sensor,
        cell=first.cell,
        batch=np.concatenate([np.full(g.num_nodes, b, dtype=np.int64) for b, g in enumerate(graphs)]),
        num_graphs=len(graphs),
    )


@dataclass
class GraphSequence:
    graphs: list[EventGraph]
    label: int | None = None

    @property
    def s_count(self) -> int:
        return len(self.graphs)


def pair_distance(e_i, e_j, alpha: float, beta: float) -> float:
    """Weighted spatio-temporal distance between two events."""
    dx = float(e_i[0]) - float(e_j[0])
    dy = float(e_i[1]) - float(e_j[1])
    dt = float(e_i[2]) - float(e_j[2])
    return math.sqrt(alpha * (dx * dx + dy * dy) + beta * dt * dt)


def pseudo_coords(pos: np.ndarray, edge_index: np.ndarray, batch: np.ndarray | None = None,
                  num_graphs: int = 1) -> np.ndarray:
    """(|dx|, |dy|) per edge scaled by the per-graph, per-axis maximum over edges."""
    src, dst = edge_index
    u = np.abs(pos[src, :2] - pos[dst, :2])
    if len(u) == 0:
        return u.reshape(0, 2)
    gid = np.zeros(len(u), dtype=np.int64) if batch is None else batch[src]
    scale = np.zeros((num_graphs, 2))
    np.maximum.at(scale, gid, u)
    scale = scale[gid]
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(scale > 0, u / np.where(scale > 0, scale, 1.0), 0.0)
    return np.clip(u, 0.0, 1.0)


def _cell_scale(weight: float, radius: float) -> float:
    # bucket width R/sqrt(w) in raw units, expressed as a multiplier
    return math.sqrt(weight) / radius if weight > 0 else 0.0


def radius_candidates(coords: np.ndarray, params: GraphParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, with weighted distance <= R, via grid bucketing."""
    n = len(coords)
    scales = np.array([_cell_scale(params.alpha, params.radius)] * 2 + [_cell_scale(params.beta, params.radius)])
    keys = np.floor((coords - coords.min(axis=0)) * scales).astype(np.int64)
    span = keys.max(axis=0) + 3
    flat = lambda k: (k[:, 0] * span[1] + k[:, 1]) * span[2] + k[:, 2]  # noqa: E731
    # shift by one so neighbouring offsets never go negative
    keys = keys + 1
    order = np.argsort(flat(keys), kind="stable")
    sorted_keys = flat(keys)[order]
    src_parts, dst_parts = [], []
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for ot in (-1, 0, 1):
                q = flat(keys + np.array([ox, oy, ot]))
                lo = np.searchsorted(sorted_keys, q, side="left")
                hi = np.searchsorted(sorted_keys, q, side="right")
                cnt = hi - lo
                if cnt.sum() == 0:
                    continue
                src = np.repeat(np.arange(n), cnt)
                start = np.repeat(lo - np.cumsum(cnt) + cnt, cnt)
                dst = order[start + np.arange(cnt.sum())]
                src_parts.append(src)
                dst_parts.append(dst)
    src = np.concatenate(src_parts) if src_parts else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, dtype=np.int64)
    d = edge_distances(coords, src, dst, params.alpha, params.beta)
    keep = (src != dst) & (d <= params.radius)
    return src[keep], dst[keep], d[keep]


def edge_distances(coords: np.ndarray, src: np.ndarray, dst: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    diff = coords[src] - coords[dst]
    return np.sqrt(alpha * (diff[:, 0] ** 2 + diff[:, 1] ** 2) + beta * diff[:, 2] ** 2)


def cap_degree(src: np.ndarray, dst: np.ndarray, dist: np.ndarray, d_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``d_max`` nearest out-neighbours of every node, ties to lower index."""
    order = np.lexsort((dst, dist, src))
    src, dst = src[order], dst[order]
    if len(src) == 0:
        return src, dst
    first = np.r_[0, np.flatnonzero(np.diff(src)) + 1]
    run_start = np.repeat(first, np.diff(np.r_[first, len(src)]))
    rank = np.arange(len(src)) - run_start
    keep = rank < d_max
    src, dst = src[keep], dst[keep]
    order = np.lexsort((dst, src))
    return src[order], dst[order]


def build_graph(events, params: GraphParams, width: int | None = None, height: int | None = None) -> EventGraph:
    """Graph over the given events (an EventStream or a sequence of Event)."""
    if isinstance(events, EventStream):
        width = events.width if width is None else width
        height = events.height if height is None else height
        coords = np.stack([events.x, events.y, events.t], axis=1).astype(np.float64)
        pol = events.p.astype(np.float64)
    else:
        events = [Event(*e) for e in events]
        if not events:
            raise ValueError("cannot build a graph from zero events")
        coords = np.array([[e.x, e.y, e.t] for e in events], dtype=np.float64)
        pol = np.array([e.p for e in events], dtype=np.float64)
    if len(coords) == 0:
        raise ValueError("cannot build a graph from zero events")
    if width is None:
        width = int(coords[:, 0].max()) + 1
    if height is None:
        height = int(coords[:, 1].max()) + 1
    src, dst, dist = radius_candidates(coords, params)
    src, dst = cap_degree(src, dst, dist, params.d_max)
    edge_index = np.stack([src, dst])
    return EventGraph(
        pos=coords,
        features=pol.reshape(-1, 1),
        edge_index=edge_index,
        pseudo=pseudo_coords(coords, edge_index),
        extent=(height, width),
        sensor=(height, width),
    )


def placeholder_graph(width: int, height: int, t_center: float) -> EventGraph:
    """Single zero-feature node at the centre of the sensor, used for empty windows."""
    return EventGraph(
        pos=np.array([[(width - 1) / 2.0, (height - 1) / 2.0, t_center]]),
        features=np.zeros((1, 1)),
        edge_index=np.zeros((2, 0), dtype=np.int64),
        pseudo=np.zeros((0, 2)),
        extent=(height, width),
        sensor=(height, width),
    )


def segment_stream(stream: EventStream, s_count: int, params: GraphParams,
                   sampling: SamplingParams = SamplingParams(), rng_seed: int = 0) -> GraphSequence:
    """Split a stream into ``s_count`` equal volumes and build one graph per volume.

    Each volume contributes a ``t_vol`` window with a uniformly random start;
    volume ``n`` draws from a generator seeded by ``(rng_seed, n)``.
    """
    if s_count < 1:
        raise ValueError("s_count must be >= 1")
    if len(stream) == 0:
        raise ValueError("cannot segment an empty stream")
    T = stream.duration
    t_vol = params.t_vol_us
    if T < s_count * t_vol:
        raise ValueError(f"stream lasts {T} us, shorter than {s_count} x {t_vol} us")
    t0 = int(stream.t[0])
    graphs = []
    for n in range(s_count):
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, n]))
        v_start = t0 + (n * T) // s_count
        v_end = t0 + ((n + 1) * T) // s_count
        start = int(rng.integers(v_start, max(v_start, v_end - t_vol) + 1))
        sub_params = replace(sampling, rng_seed=int(rng.integers(2**63 - 1)))
        sampled = non_uniform_sample(stream, (start, start + t_vol), sub_params)
        if len(sampled) == 0:
            graphs.append(placeholder_graph(stream.width, stream.height, (v_start + v_end) / 2.0))
        else:
            graphs.append(build_graph(sampled, params))
    return GraphSequence(graphs, stream.label)


# --- GRF1 container -------------------------------------------------------

GRAPH_MAGIC = b"GRF1"
GRAPH_VERSION = 1
_SEQ_HEADER = struct.Struct("<4sIiI")
_GRAPH_HEADER = struct.Struct("<IIIIIIIdd")


def save_sequence(seq: GraphSequence, path) -> None:
    """Little-endian: header, then per graph a header, node table, edge table, pseudo table."""
    label = -1 if seq.label is None else int(seq.label)
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, label, len(seq.graphs)))
        for g in seq.graphs:
            fh.write(_GRAPH_HEADER.pack(g.num_nodes, g.num_edges, g.features.shape[1],
                                        g.extent[0], g.extent[1], g.sensor[0], g.sensor[1], *g.cell))
            fh.write(np.ascontiguousarray(g.pos, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(g.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(g.edge_index, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(g.pseudo, dtype="<f8").tobytes())


def load_sequence(path) -> GraphSequence:
    raw = Path(path).read_bytes()
    magic, version, label, count = _SEQ_HEADER.unpack_from(raw, 0)
    if magic != GRAPH_MAGIC:
        raise ValueError(f"{path}: not a GRF1 graph file")
    if version != GRAPH_VERSION:
        raise ValueError(f"{path}: unsupported GRF1 version {version}")
    off = _SEQ_HEADER.size
    graphs = []

    def take(dtype, n):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).copy()
        off += arr.nbytes
        return arr

    for _ in range(count):
        n, e, c, eh, ew, sh, sw, ch, cw = _GRAPH_HEADER.unpack_from(raw, off)
        off += _GRAPH_HEADER.size
        pos = take("<f8", 3 * n).reshape(n, 3)
        feats = take("<f8", c * n).reshape(n, c)
        edges = take("<i8", 2 * e).reshape(2, e)
        pseudo = take("<f8", 2 * e).reshape(e, 2)
        graphs.append(EventGraph(pos, feats, edges, pseudo, (eh, ew), (sh, sw), (ch, cw)))
    return GraphSequence(graphs, None if label < 0 else label)
