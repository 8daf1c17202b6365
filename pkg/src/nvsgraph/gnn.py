"""B-spline graph convolution, residual graph blocks and the graph fully-connected layer."""

from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from . import diffengine as de
from .diffengine import DiffArray
from .graph_build import EventGraph
from .layers import BatchNorm, Module, uniform_init


def open_uniform_knots(k: int, m: int) -> np.ndarray:
    """Knot vector of ``k`` open uniform B-spline bases of degree ``m`` on [0, 1]."""
    if k < m + 1:
        raise ValueError(f"{k} bases cannot carry degree {m}")
    inner = np.linspace(0.0, 1.0, k - m + 1)
    return np.concatenate([np.zeros(m), inner, np.ones(m)])


def _axis_basis(u: np.ndarray, k: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the (m+1) possibly non-zero bases at each ``u``."""
    m = min(m, k - 1)  # a single basis per axis is the constant function
    if m == 0:
        return np.zeros((len(u), 1), dtype=np.int64), np.ones((len(u), 1))
    knots = open_uniform_knots(k, m)
    span = np.clip(np.searchsorted(knots, u, side="right") - 1, m, k - 1)
    n = np.zeros((len(u), m + 1))
    n[:, 0] = 1.0
    left = np.zeros((len(u), m + 1))
    right = np.zeros((len(u), m + 1))
    for j in range(1, m + 1):
        left[:, j] = u - knots[span + 1 - j]
        right[:, j] = knots[span + j] - u
        saved = np.zeros(len(u))
        for r in range(j):
            temp = n[:, r] / (right[:, r + 1] + left[:, j - r])
            n[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        n[:, j] = saved
    idx = span[:, None] - m + np.arange(m + 1)
    return idx, n


def spline_weights(pseudo: np.ndarray, kernel_size, degree: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Flat kernel indices and basis products for every row of ``pseudo``.

    Returns arrays of shape (E, P) where P is the number of axis-basis
    combinations; the flat index of tuple ``z`` is row-major over ``kernel_size``.
    """
    pseudo = np.clip(np.asarray(pseudo, dtype=np.float64), 0.0, 1.0)
    e, d = pseudo.shape
    if d != len(kernel_size):
        raise ValueError(f"pseudo-coordinates have {d} dims, kernel has {len(kernel_size)}")
    per_axis = [_axis_basis(pseudo[:, a], int(kernel_size[a]), degree) for a in range(d)]
    strides = np.cumprod([1] + [int(k) for k in kernel_size[::-1]])[:-1][::-1]
    idx_cols, val_cols = [], []
    for combo in itertools.product(*[range(ix.shape[1]) for ix, _ in per_axis]):
        flat = np.zeros(e, dtype=np.int64)
        val = np.ones(e)
        for a, c in enumerate(combo):
            flat += per_axis[a][0][:, c] * strides[a]
            val *= per_axis[a][1][:, c]
        idx_cols.append(flat)
        val_cols.append(val)
    return np.stack(idx_cols, axis=1), np.stack(val_cols, axis=1)


def spline_basis(u, kernel_size=(5, 5), degree: int = 1) -> list[tuple[tuple[int, ...], float]]:
    """Non-zero (index tuple, basis product) pairs at a single pseudo-coordinate."""
    idx, val = spline_weights(np.asarray(u, dtype=np.float64).reshape(1, -1), kernel_size, degree)
    out = []
    for flat, v in zip(idx[0], val[0]):
        if v != 0.0:
            out.append((tuple(int(z) for z in np.unravel_index(flat, tuple(kernel_size))), float(v)))
    return out


def aggregation_matrix(graph: EventGraph, kernel_size, degree: int) -> sp.csr_matrix:
    """Sparse (N*K, N) operator: row ``i*K + z`` holds basis weight / |N(i)| for each neighbour ``j``."""
    key = ("spline", tuple(kernel_size), degree)
    cached = graph._cache.get(key)
    if cached is not None:
        return cached
    n = graph.num_nodes
    k = int(np.prod(kernel_size))
    src, dst = graph.edge_index
    idx, val = spline_weights(graph.pseudo, kernel_size, degree)
    deg = np.bincount(src, minlength=n).astype(np.float64)
    scale = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)[src]
    rows = (src[:, None] * k + idx).ravel()
    cols = np.repeat(dst, idx.shape[1])
    vals = (val * scale[:, None]).ravel()
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n * k, n))
    graph._cache[key] = mat
    return mat


class GConv(Module):
    """Spline graph convolution with bias, optional batch norm, then activation."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size=(5, 5), degree: int = 1, batch_norm: bool = True,
                 activation: str | None = "relu"):
        if degree < 1 or min(kernel_size) < 1:
            raise ValueError("degree and kernel sizes must be >= 1")
        if activation not in ("relu", None):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = tuple(int(k) for k in kernel_size)
        self.degree = degree
        self.activation = activation
        k = int(np.prod(self.kernel_size))
        self.weight = uniform_init(rng, (k, in_channels, out_channels), in_channels)
        self.bias = DiffArray(np.zeros(out_channels), requires_grad=True)
        self.bn = BatchNorm(out_channels) if batch_norm else None

    def forward(self, graph: EventGraph, x: DiffArray) -> DiffArray:
        return gconv_forward(graph, x, self)


def gconv_forward(graph: EventGraph, features: DiffArray, layer: GConv) -> DiffArray:
    features = de.as_diff(features)
    if features.shape != (graph.num_nodes, layer.in_channels):
        raise ValueError(
            f"expected features of shape ({graph.num_nodes}, {layer.in_channels}), got {features.shape}"
        )
    k = int(np.prod(layer.kernel_size))
    agg = de.spmm(aggregation_matrix(graph, layer.kernel_size, layer.degree), features)
    agg = de.reshape(agg, (graph.num_nodes, k * layer.in_channels))
    w = de.reshape(layer.weight, (k * layer.in_channels, layer.out_channels))
    out = de.matmul(agg, w) + layer.bias
    if layer.bn is not None:
        out = layer.bn(out)
    if layer.activation == "relu":
        out = de.relu(out)
    return out


class ResidualGraphBlock(Module):
    """relu(main(x) + shortcut(x)); main = two 5x5 spline convs, shortcut = 1x1 spline conv."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size=(5, 5), degree: int = 1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = GConv(in_channels, out_channels, rng, kernel_size, degree, activation="relu")
        self.conv2 = GConv(out_channels, out_channels, rng, kernel_size, degree, activation=None)
        self.shortcut = GConv(in_channels, out_channels, rng, (1,) * len(kernel_size), degree, activation=None)

    def forward(self, graph: EventGraph, x: DiffArray) -> DiffArray:
        return residual_block_forward(graph, x, self)


def residual_block_forward(graph: EventGraph, features: DiffArray, block: ResidualGraphBlock) -> DiffArray:
    main = block.conv2(graph, block.conv1(graph, features))
    return de.relu(main + block.shortcut(graph, features))


def grid_slots(graph: EventGraph) -> np.ndarray:
    """Flat slot ``graph_id * H*W + row * W + col`` for each node at the current level."""
    cells = graph.cells()
    h, w = graph.extent
    bad = (cells[:, 0] < 0) | (cells[:, 0] >= h) | (cells[:, 1] < 0) | (cells[:, 1] >= w)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"node {i} at cell {tuple(cells[i])} lies outside extent {graph.extent}")
    return graph.batch * (h * w) + cells[:, 0] * w + cells[:, 1]


def graph_fc(features: DiffArray, graph: EventGraph, weights: DiffArray, activation: str | None = None) -> DiffArray:
    """Fully-connected map from the fixed H_f x W_f node layout to Q outputs.

    Node features are placed at their integer cell (max over collisions, zero
    where empty) and multiplied by ``weights`` of shape (H_f*W_f, M_in, Q).
    Returns (num_graphs, Q).
    """
    features = de.as_diff(features)
    weights = de.as_diff(weights)
    h, w = graph.extent
    slots, m_in, q = weights.shape
    if slots != h * w:
        raise ValueError(f"weights cover {slots} slots, graph extent {graph.extent} has {h * w}")
    if features.shape[1] != m_in:
        raise ValueError(f"features have {features.shape[1]} channels, weights expect {m_in}")
    grid = de.scatter_max(features, grid_slots(graph), graph.num_graphs * slots)
    flat = de.reshape(grid, (graph.num_graphs, slots * m_in))
    out = de.matmul(flat, de.reshape(weights, (slots * m_in, q)))
    return de.relu(out) if activation == "relu" else out


class GraphFC(Module):
    def __init__(self, slots: int, in_channels: int, out_features: int, rng: np.random.Generator,
                 activation: str | None = "relu"):
        self.slots = slots
        self.in_channels = in_channels
        self.out_features = out_features
        self.activation = activation
        self.weight = uniform_init(rng, (slots, in_channels, out_features), slots * in_channels)

    def forward(self, graph: EventGraph, x: DiffArray) -> DiffArray:
        return graph_fc(x, graph, self.weight, self.activation)
