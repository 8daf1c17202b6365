"""Acceptance criteria 1-7. Each test prints one PASS/FAIL line before asserting."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from nvsgraph import diffengine as de
from nvsgraph.cnn3d import Conv3D, conv3d_forward, pool3d
from nvsgraph.complexity import flops_conv2d, flops_fc, flops_gconv, params_fc, report_model, GraphStats
from nvsgraph.config import load_model_config, preset_path
from nvsgraph.diffengine import DiffArray
from nvsgraph.event_io import Event, EventStream
from nvsgraph.gnn import GConv, ResidualGraphBlock, gconv_forward, graph_fc, spline_basis, spline_weights
from nvsgraph.graph2grid import graph_to_grid
from nvsgraph.graph_build import GraphParams, build_graph, segment_stream
from nvsgraph.graph_pool import PoolParams, max_pool_graph
from nvsgraph.layers import BatchNorm, graph_batchnorm
from nvsgraph.models import build_model, final_extent, trace_extents
from nvsgraph.sampling import SamplingParams, non_uniform_sample, octree_leaves
from nvsgraph.synth import load_synth_spec, split_names, synth_dataset
from nvsgraph.train import build_dataset, cross_entropy_softmax, train_model

from conftest import random_graph
from oracles import (
    PRESET_CHAINS, audit_params, conv3d_loops, gconv_dense, octree_partition, partition_pool, pool3d_loops,
    radius_graph_edges,
)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
        assert ok, detail
    return emit


# --- 1. gradient fidelity ------------------------------------------------------------------

def central_difference_error(fn, arrays, eps=1e-6, floor=1e-8):
    """Largest relative (norm) gap between backprop and central differences over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [DiffArray(a.copy(), requires_grad=True) for a in arrays]
    de.backward(fn(*leaves))
    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in arrays]
            minus = [b.copy() for b in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            with de.no_grad():
                hi = fn(*map(DiffArray, plus)).item()
                lo = fn(*map(DiffArray, minus)).item()
            numeric[idx] = (hi - lo) / (2 * eps)
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > floor:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def gradient_cases(rng):
    """Yield (layer name, fn, inputs) for one random small instance of every differentiable layer."""
    g = random_graph(rng, n=6, channels=2)
    proj = rng.normal(size=(6, 3))

    layer = GConv(2, 3, rng, batch_norm=False, activation=None)

    def gconv(x, w, b):
        layer.weight, layer.bias = w, b
        return de.reduce_sum(gconv_forward(g, x, layer) * proj)

    yield "gconv", gconv, [g.features, layer.weight.data, rng.normal(size=3)]

    bn = BatchNorm(3)

    def batchnorm(x, gamma, beta):
        bn.gamma, bn.beta = gamma, beta
        return de.reduce_sum(graph_batchnorm(x, bn) * proj)

    yield "graph_bn", batchnorm, [rng.normal(size=(6, 3)), rng.uniform(0.5, 2, 3), rng.normal(size=3)]

    block = ResidualGraphBlock(2, 3, rng)

    def residual(x, w1, w2, ws):
        block.conv1.weight, block.conv2.weight, block.shortcut.weight = w1, w2, ws
        return de.reduce_sum(block(g, x) * proj)

    yield "residual_block", residual, [g.features, block.conv1.weight.data, block.conv2.weight.data,
                                       block.shortcut.weight.data]

    cells = rng.choice(12, 5, replace=False)
    fc_graph = random_graph(rng, n=5, extent=(3, 4), channels=2)
    fc_graph = fc_graph.with_pos(np.column_stack([cells % 4 + 0.5, cells // 4 + 0.5, np.zeros(5)]))
    head = rng.normal(size=4)
    yield "graph_fc", (lambda x, w: de.reduce_sum(graph_fc(x, fc_graph, w) * head)), \
        [rng.normal(size=(5, 2)), rng.normal(size=(12, 2, 4))]

    big = random_graph(rng, n=12, extent=(6, 6), channels=3)
    pool_w = rng.normal(size=(12, 3))

    def pooling(x):
        _, y = max_pool_graph(big, x, PoolParams(2, 3))
        return de.reduce_sum(y * pool_w[: y.shape[0]])

    yield "graph_pool", pooling, [rng.normal(size=(12, 3))]

    grid_w = rng.normal(size=(6, 6, 3))
    yield "graph2grid", (lambda x: de.reduce_sum(graph_to_grid(big, x) * grid_w)), [rng.normal(size=(12, 3))]

    conv = Conv3D(2, 2, rng, batch_norm=False, activation=None)
    conv_w = rng.normal(size=(3, 3, 2, 2))

    def conv3d(x, w, b):
        conv.weight, conv.bias = w, b
        return de.reduce_sum(conv3d_forward(x, conv) * conv_w)

    yield "conv3d", conv3d, [rng.normal(size=(3, 3, 2, 2)), conv.weight.data, rng.normal(size=2)]

    pool_proj = rng.normal(size=(2, 2, 3, 2))
    yield "pool3d", (lambda x: de.reduce_sum(pool3d(x, (2, 2, 2), (2, 2, 1)) * pool_proj)), \
        [rng.normal(size=(4, 4, 3, 3))]

    labels = rng.integers(0, 4, 3)
    yield "softmax_ce", (lambda z: cross_entropy_softmax(z, labels)), [rng.normal(size=(3, 4)) * 3]


def test_criterion_1_gradient_fidelity(verdict):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for trial in range(20):
        for name, fn, inputs in gradient_cases(np.random.default_rng(1000 + trial)):
            err = central_difference_error(fn, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    ok = len(worst) == 9 and min(counts.values()) >= 20 and max(worst.values()) <= 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(worst)} layers x {min(counts.values())} instances, worst rel err "
                   f"{max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")


# --- 2. oracle equivalence -------------------------------------------------------------------

def check_graph_oracle(rng, params):
    n = int(rng.integers(2, 501))
    side = int(rng.integers(4, 24))
    xy = rng.integers(0, side, (n, 2))
    t = np.sort(rng.integers(0, int(rng.integers(1, 6000)), n))
    events = [Event(int(x), int(y), int(tt), int(rng.choice([-1, 1]))) for (x, y), tt in zip(xy, t)]
    g = build_graph(events, params)
    coords = np.column_stack([xy, t]).astype(float)
    ref = radius_graph_edges(coords, params.radius, params.alpha, params.beta, params.d_max)
    return sorted(map(tuple, g.edge_index.T.tolist())) == ref, g.num_edges


def check_pool_oracle(g, params):
    coarse, x = max_pool_graph(g, DiffArray(g.features), params)
    cell, _ = params.target(g)
    nodes, edges = partition_pool(g.pos.tolist(), g.features.tolist(), g.edge_index.T.tolist(), cell)
    keys = [(math.floor(p[1] / cell[0]), math.floor(p[0] / cell[1])) for p in coarse.pos]
    if coarse.num_nodes != len(nodes) or len(set(keys)) != len(keys):
        return False
    for k, p, f in zip(keys, coarse.pos, x.data):
        if not (np.allclose(p, nodes[k][0], rtol=1e-12, atol=0) and np.array_equal(f, nodes[k][1])):
            return False
    return {(keys[i], keys[j]) for i, j in coarse.edge_index.T.tolist()} == edges


def test_criterion_2_oracle_equivalence(verdict):
    rng = np.random.default_rng(2)
    params = GraphParams()
    graph_ok, edge_total = 0, 0
    for _ in range(100):
        ok, ne = check_graph_oracle(rng, params)
        graph_ok += ok
        edge_total += ne

    gconv_err = 0.0
    for _ in range(20):
        g = random_graph(rng, n=8, channels=2)
        layer = GConv(2, 3, rng, batch_norm=False, activation=None)
        layer.bias = DiffArray(rng.normal(size=3))
        got = gconv_forward(g, DiffArray(g.features), layer).data
        ref = gconv_dense(g.features, g.edge_index.T.tolist(), g.pseudo, layer.weight.data, layer.bias.data,
                          (5, 5), 1)
        gconv_err = max(gconv_err, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300))))

    pool_ok = sum(check_pool_oracle(random_graph(rng, n=60, extent=(16, 20), p_edge=0.05, channels=3),
                                    PoolParams(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
                  for _ in range(20))

    conv_ok = pool3_ok = 0
    for _ in range(10):
        clip = rng.integers(-4, 5, size=(4, 5, 2, 3)).astype(float)
        layer = Conv3D(2, 3, rng, batch_norm=False, activation=None)
        layer.weight = DiffArray(rng.integers(-3, 4, size=(3, 2, 3, 3, 3)).astype(float))
        layer.bias = DiffArray(rng.integers(-2, 3, size=3).astype(float))
        conv_ok += np.array_equal(conv3d_forward(clip, layer).data,
                                  conv3d_loops(clip, layer.weight.data, layer.bias.data))
        x = rng.normal(size=(5, 6, 2, 5))
        pool3_ok += all(np.array_equal(pool3d(x, (2, 2, 2), s).data, pool3d_loops(x, (2, 2, 2), s))
                        for s in ((2, 2, 1), (2, 2, 2)))

    sample_ok = 0
    for _ in range(20):
        n = int(rng.integers(1, 400))
        flat = rng.choice(32 * 32 * 4000, n, replace=False)
        x, rest = flat % 32, flat // 32
        y, t = rest % 32, np.sort(rest // 32)
        stream = EventStream.from_events([(int(a), int(b), int(c), 1) for a, b, c in zip(x, y, t)], 32, 32)
        coords = np.stack([stream.x, stream.y, stream.t], axis=1).astype(float)
        k = int(rng.integers(1, 10))
        leaves = octree_partition(coords, k)
        same_leaves = {frozenset(a.tolist()) for a in octree_leaves(coords, k)} == leaves
        picked = non_uniform_sample(stream, (0, 4000), SamplingParams(k, int(rng.integers(0, 99))))
        index = {(int(a), int(b), int(c)): i for i, (a, b, c) in enumerate(coords)}
        hit = [next(L for L in leaves if index[(e.x, e.y, e.t)] in L) for e in picked]
        sample_ok += same_leaves and len(hit) == len(set(hit)) == len(leaves)

    ok = (graph_ok == 100 and gconv_err <= 1e-12 and pool_ok == 20 and conv_ok == 10 and pool3_ok == 10
          and sample_ok == 20)
    verdict(2, ok, f"build_graph {graph_ok}/100 exact ({edge_total} edges), gconv max rel {gconv_err:.1e}, "
                   f"pool {pool_ok}/20, conv3d {conv_ok}/10, pool3d {pool3_ok}/10, sampling {sample_ok}/20")


# --- 3. B-spline kernel --------------------------------------------------------------------------

def test_criterion_3_bspline_partition_of_unity(verdict):
    grid = np.linspace(0.0, 1.0, 101)
    u = np.vstack([np.array(np.meshgrid(grid, grid)).reshape(2, -1).T,
                   np.random.default_rng(3).random((10_000, 2))])
    worst = 0.0
    for kernel, degree in (((5, 5), 1), ((4, 6), 2), ((5, 3), 3)):
        _, val = spline_weights(u, kernel, degree)
        worst = max(worst, float(np.max(np.abs(val.sum(axis=1) - 1.0))))
        assert np.all(val >= 0)
    boundary = all(
        dict(spline_basis((0.0, 0.0), k)) == {(0, 0): 1.0}
        and dict(spline_basis((1.0, 1.0), k)) == {(k[0] - 1, k[1] - 1): 1.0}
        for k in ((5, 5), (3, 7), (2, 2))
    )
    ok = worst <= 1e-12 and boundary
    verdict(3, ok, f"{len(u)} points, max |sum - 1| = {worst:.1e}, boundary cases {'ok' if boundary else 'wrong'}")


# --- 4. complexity formulas ------------------------------------------------------------------------

def test_criterion_4_complexity(verdict):
    subs = (flops_conv2d(2, 2, 3, 3, 4), flops_gconv(10, 5, 1, 2, 2, 4), flops_fc(3, 2), params_fc(128, 10))
    stats = GraphStats((1000.0, 300.0, 50.0, 5.0, 1.0), (20000.0, 3000.0, 200.0, 10.0, 0.0))
    audits = {}
    for name, chain in PRESET_CHAINS.items():
        cfg = load_model_config(name)
        audits[name] = (audit_params(chain), report_model(cfg, stats).total_params, build_model(cfg, 0).num_parameters())
    ok = subs == (896, 1580, 10, 1290) and all(a == b == c for a, b, c in audits.values())
    detail = ", ".join(f"{k} {v[0]}" for k, v in audits.items())
    verdict(4, ok, f"substitutions {subs}; parameter totals (hand = report = model): {detail}")


# --- 5. extent arithmetic -----------------------------------------------------------------------------

def test_criterion_5_extent(verdict):
    cfg = load_model_config("action_res3d")
    declared = final_extent(cfg)
    # relative reading of the same cluster sizes, (rows, cols) = (2,2), (4,3), (8,6)
    rel = (math.ceil(math.ceil(math.ceil(180 / 2) / 4) / 8), math.ceil(math.ceil(math.ceil(240 / 2) / 3) / 6))
    # real graphs from a 240x180 stream pooled through the configured chain
    rng = np.random.default_rng(5)
    n = 20_000
    stream = EventStream.from_events(
        sorted(zip(rng.integers(0, 240, n).tolist(), rng.integers(0, 180, n).tolist(),
                   rng.integers(0, 1_000_000, n).tolist(), rng.choice([-1, 1], n).tolist()), key=lambda e: e[2]),
        240, 180)
    seq = segment_stream(stream, 8, cfg.graph, cfg.sampling, 0)
    model = build_model(replace(cfg, width=1 / 16), 0)
    observed = set()
    with de.no_grad():
        model.eval()
        for g in seq.graphs:
            coarse, x = model.spatial(g)
            observed.add(coarse.extent)
            assert np.all(coarse.cells() < np.array(coarse.extent))
    ok = declared[0] <= 30 and declared[1] <= 30 and rel[0] <= 30 and rel[1] <= 30 and observed == {declared}
    verdict(5, ok, f"stages {trace_extents(cfg)}, grid {declared[0]}x{declared[1]} (relative reading "
                   f"{rel[0]}x{rel[1]}), {len(seq.graphs)} pooled graphs all at {sorted(observed)}")


# --- 6. desk-scale learning ----------------------------------------------------------------------------

DATA_SEED = 7


def desk_run(spec_name, cfg_name):
    spec = load_synth_spec(preset_path(spec_name))
    streams = synth_dataset(spec, DATA_SEED)
    splits = split_names(spec)
    cfg = load_model_config(cfg_name)
    seqs = build_dataset(streams, cfg, DATA_SEED)
    train = [s for s, sp in zip(seqs, splits) if sp == "train"]
    val = [s for s, sp in zip(seqs, splits) if sp == "val"]
    result = train_model(train, val, cfg)
    return len(train), len(val), result


@pytest.mark.slow
def test_criterion_6_desk_scale_learning(verdict):
    start = time.perf_counter()
    n_tr, n_va, obj = desk_run("synth_two_class", "desk_object")
    obj_train = max(r["train_acc"] for r in obj.metrics)
    obj_val = obj.metrics[obj.best_epoch - 1]["val_acc"]
    _, _, mot = desk_run("synth_motion4", "desk_motion")
    mot_val = mot.metrics[mot.best_epoch - 1]["val_acc"]
    _, _, abl = desk_run("synth_motion4", "desk_motion_s1")
    abl_val = max(r["val_acc"] for r in abl.metrics)
    elapsed = time.perf_counter() - start
    ok = (n_tr, n_va) == (40, 10) and obj_train >= 0.95 and obj_val >= 0.80 and mot_val >= 0.80 \
        and abl_val <= 0.25 + 0.15 and elapsed <= 30 * 60
    verdict(6, ok, f"object S=1: best train acc {obj_train:.3f}, val acc {obj_val:.3f}; motion S=8 res3d val acc "
                   f"{mot_val:.3f}; S=1 ablation best val acc {abl_val:.3f} (limit 0.40); {elapsed / 60:.1f} min")


# --- 7. determinism -----------------------------------------------------------------------------------

def test_criterion_7_determinism(verdict, tmp_path):
    spec = load_synth_spec(preset_path("synth_two_class"))
    spec.streams_per_class, spec.val_per_class = 6, 2
    cfg = load_model_config("desk_object")
    tc = replace(cfg.train, epochs=4, milestones=(2,))
    act = replace(load_model_config("desk_motion"), s_count=2)
    act_tc = replace(act.train, epochs=2, batch_size=4)
    same = []
    for run in ("a", "b"):
        streams = synth_dataset(spec, 11)
        splits = split_names(spec)
        seqs = build_dataset(streams, cfg, 11)
        tr = [s for s, sp in zip(seqs, splits) if sp == "train"]
        va = [s for s, sp in zip(seqs, splits) if sp == "val"]
        train_model(tr, va, cfg, tc, out_dir=tmp_path / run / "object")
        # a small action run exercises the Graph2Grid and 3D head path as well
        relabel = [replace(s, label=s.label % act.num_classes) for s in build_dataset(streams, act, 11)]
        train_model(relabel[:8], relabel[8:], act, act_tc, out_dir=tmp_path / run / "action")
    files = ["object/metrics.csv", "object/best.ckp", "action/metrics.csv", "action/best.ckp"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    verdict(7, all(same), "bit-identical across two seeded runs: " +
            ", ".join(f"{f} {'yes' if s else 'NO'}" for f, s in zip(files, same)))
