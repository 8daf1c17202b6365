import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvsgraph.event_io import Event, EventStream
from nvsgraph.graph_build import (
    GraphParams, GraphSequence, batch_graphs, build_graph, load_sequence, pair_distance, save_sequence,
    segment_stream,
)
from nvsgraph.sampling import SamplingParams

from oracles import pseudo_reference, radius_graph_edges

P = GraphParams()


def edges_of(g):
    return sorted(map(tuple, g.edge_index.T.tolist()))


def test_pair_distance_examples():
    assert pair_distance((0, 0, 0), (3, 0, 0), 1.0, 0.5e-5) == 3.0
    assert pair_distance((4, 5, 6), (4, 5, 6), 1.0, 0.5e-5) == 0.0
    assert pair_distance((0, 0, 0), (0, 0, 1000), 1.0, 0.5e-5) == pytest.approx(math.sqrt(5.0), abs=1e-12)
    assert round(pair_distance((0, 0, 0), (0, 0, 1000), 1.0, 0.5e-5), 4) == 2.2361


def test_radius_is_inclusive():
    g = build_graph([Event(0, 0, 0, 1), Event(3, 0, 0, -1)], P)
    assert edges_of(g) == [(0, 1), (1, 0)]
    assert g.features.ravel().tolist() == [1.0, -1.0]
    g = build_graph([Event(0, 0, 0, 1), Event(4, 0, 0, 1)], P)
    assert g.num_edges == 0


def test_dense_cluster_is_capped():
    rng = np.random.default_rng(0)
    ev = [Event(int(x), int(y), 0, 1) for x, y in rng.integers(0, 2, (40, 2))]
    g = build_graph(ev, P)
    assert np.all(g.out_degree() == 32)
    coords = np.array([[e.x, e.y, e.t] for e in ev], dtype=float)
    assert edges_of(g) == radius_graph_edges(coords, 3.0, 1.0, 0.5e-5, 32)


def test_empty_events_rejected():
    with pytest.raises(ValueError):
        build_graph([], P)


def test_pseudo_coordinates():
    ev = [Event(0, 0, 0, 1), Event(2, 0, 0, 1), Event(2, 1, 0, 1)]
    g = build_graph(ev, P)
    coords = [(e.x, e.y, e.t) for e in ev]
    np.testing.assert_allclose(g.pseudo, pseudo_reference(coords, edges_of(g)))
    # constant y axis maps to zero
    g = build_graph([Event(0, 0, 0, 1), Event(2, 0, 0, 1)], P)
    np.testing.assert_array_equal(g.pseudo, [[1.0, 0.0], [1.0, 0.0]])


def random_coords(rng, n, size=12, t_span=4000):
    return np.column_stack([rng.integers(0, size, n), rng.integers(0, size, n), rng.integers(0, t_span, n)])


def test_oracle_equivalence_random():
    rng = np.random.default_rng(5)
    for trial in range(20):
        n = int(rng.integers(1, 200))
        params = GraphParams(radius=float(rng.uniform(1, 4)), beta=float(rng.choice([0.0, 0.5e-5, 1e-4])),
                             d_max=int(rng.integers(1, 40)))
        coords = random_coords(rng, n)
        g = build_graph([Event(int(x), int(y), int(t), 1) for x, y, t in coords], params, 12, 12)
        assert edges_of(g) == radius_graph_edges(coords, params.radius, params.alpha, params.beta, params.d_max)


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 3000), st.sampled_from([1, -1])),
                min_size=1, max_size=60), st.integers(1, 12))
def test_graph_invariants(rows, d_max):
    params = GraphParams(d_max=d_max)
    ev = [Event(*r) for r in rows]
    g = build_graph(ev, params, 10, 10)
    src, dst = g.edge_index
    coords = np.array([r[:3] for r in rows], dtype=float)
    assert np.all(src != dst)
    for i, j in zip(src, dst):
        assert pair_distance(coords[i], coords[j], params.alpha, params.beta) <= params.radius
    assert np.all(g.out_degree() <= d_max)
    assert np.all((g.pseudo >= 0) & (g.pseudo <= 1))
    assert g.features.shape == (len(ev), 1)
    # below the cap the candidacy relation is symmetric
    free = g.out_degree() < d_max
    es = set(zip(src.tolist(), dst.tolist()))
    for i, j in es:
        if free[i] and free[j]:
            assert (j, i) in es


def long_stream(duration_us=800_000, seed=0, w=32, h=32, rate=40):
    rng = np.random.default_rng(seed)
    n = duration_us // 1000 * rate // 10
    t = np.sort(rng.integers(0, duration_us, n))
    t[0], t[-1] = 0, duration_us - 1
    return EventStream(rng.integers(0, w, n), rng.integers(0, h, n), t, rng.choice([-1, 1], n), w, h, label=1)


def test_segment_eight_volumes():
    s = long_stream()
    seq = segment_stream(s, 8, P, SamplingParams(), rng_seed=3)
    assert seq.s_count == 8 and seq.label == 1
    t_vol = P.t_vol_us
    assert t_vol == 33_333
    for n, g in enumerate(seq.graphs):
        lo, hi = n * 100_000, (n + 1) * 100_000
        assert lo <= g.pos[:, 2].min() and g.pos[:, 2].max() < hi
        assert g.pos[:, 2].max() - g.pos[:, 2].min() < t_vol


def test_segment_single_and_determinism():
    s = long_stream(100_000)
    a = segment_stream(s, 1, P, SamplingParams(), rng_seed=9)
    b = segment_stream(s, 1, P, SamplingParams(), rng_seed=9)
    assert a.s_count == 1
    np.testing.assert_array_equal(a.graphs[0].pos, b.graphs[0].pos)
    np.testing.assert_array_equal(a.graphs[0].edge_index, b.graphs[0].edge_index)


def test_segment_errors_and_placeholder():
    s = long_stream(100_000)
    with pytest.raises(ValueError, match="shorter"):
        segment_stream(s, 8, P)
    with pytest.raises(ValueError):
        segment_stream(s, 0, P)
    # events only at the two ends: the middle volumes hold nothing
    sparse = EventStream.from_events([(1, 1, 0, 1), (2, 2, 799_999, 1)], 8, 8)
    seq = segment_stream(sparse, 8, P, rng_seed=1)
    middle = seq.graphs[3]
    assert middle.num_nodes == 1 and middle.num_edges == 0
    assert middle.features.tolist() == [[0.0]]
    assert middle.pos[0, 2] == pytest.approx(350_000, abs=1)


def test_grf_roundtrip(tmp_path):
    seq = segment_stream(long_stream(), 4, P, rng_seed=2)
    save_sequence(seq, tmp_path / "a.grf")
    back = load_sequence(tmp_path / "a.grf")
    assert back.label == seq.label and back.s_count == 4
    for g, h in zip(seq.graphs, back.graphs):
        for attr in ("pos", "features", "edge_index", "pseudo"):
            np.testing.assert_array_equal(getattr(g, attr), getattr(h, attr))
        assert (g.extent, g.sensor, g.cell) == (h.extent, h.sensor, h.cell)
    (tmp_path / "bad.grf").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_sequence(tmp_path / "bad.grf")


def test_batch_graphs_offsets():
    a = build_graph([Event(0, 0, 0, 1), Event(1, 0, 0, 1)], P, 4, 4)
    b = build_graph([Event(3, 3, 0, -1), Event(3, 2, 0, 1), Event(2, 3, 0, 1)], P, 4, 4)
    g = batch_graphs([a, b])
    assert g.num_graphs == 2 and g.num_nodes == 5
    assert g.batch.tolist() == [0, 0, 1, 1, 1]
    assert g.edge_index[:, a.num_edges:].min() >= 2
    assert isinstance(GraphSequence([a]).s_count, int)
