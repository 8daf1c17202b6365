import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nvsgraph.graph_build import EventGraph, pseudo_coords

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng: np.random.Generator, n: int = 6, extent=(8, 8), p_edge: float = 0.5,
                 channels: int = 1) -> EventGraph:
    """Random directed graph without self loops on integer pixel positions."""
    h, w = extent
    pos = np.column_stack([rng.integers(0, w, n), rng.integers(0, h, n), rng.integers(0, 1000, n)]).astype(float)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < p_edge]
    edge_index = np.array(pairs, dtype=np.int64).T.reshape(2, -1)
    return EventGraph(pos=pos, features=rng.normal(size=(n, channels)), edge_index=edge_index,
                      pseudo=pseudo_coords(pos, edge_index), extent=extent, sensor=extent)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
