"""Non-uniform grid sampling of an event volume.

The (x, y, t) bounding box of the window is split recursively at the midpoint
of every axis with non-zero extent until a cell holds at most ``k_max``
events; one event is then drawn uniformly from every non-empty leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .event_io import EventStream

MAX_DEPTH = 32


@dataclass(frozen=True)
class SamplingParams:
    k_max: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")


def octree_leaves(coords: np.ndarray, k_max: int, max_depth: int = MAX_DEPTH) -> list[np.ndarray]:
    """Partition row indices of ``coords`` (n x 3) into octree leaves.

    Leaves are returned in depth-first order, children visited by octant code
    (bit 0 = upper x half, bit 1 = upper y half, bit 2 = upper t half).
    Points on a midpoint go to the upper half.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n == 0:
        return []
    leaves: list[np.ndarray] = []
    # explicit stack keeps the traversal order deterministic without recursion limits
    stack = [(np.arange(n), coords.min(axis=0), coords.max(axis=0), 0)]
    while stack:
        idx, lo, hi, depth = stack.pop()
        if len(idx) <= k_max or depth >= max_depth:
            leaves.append(idx)
            continue
        mid = 0.5 * (lo + hi)
        split = hi > lo
        if not split.any():
            leaves.append(idx)
            continue
        pts = coords[idx]
        code = np.zeros(len(idx), dtype=np.int64)
        for axis in range(3):
            if split[axis]:
                code |= (pts[:, axis] >= mid[axis]).astype(np.int64) << axis
        children = []
        for octant in range(8):
            member = code == octant
            if not member.any():
                continue
            clo, chi = lo.copy(), hi.copy()
            for axis in range(3):
                if not split[axis]:
                    continue
                if octant >> axis & 1:
                    clo[axis] = mid[axis]
                else:
                    chi[axis] = mid[axis]
            children.append((idx[member], clo, chi, depth + 1))
        stack.extend(reversed(children))
    return leaves


def sample_indices(coords: np.ndarray, params: SamplingParams) -> np.ndarray:
    """Sorted indices of one uniformly chosen representative per leaf."""
    rng = np.random.default_rng(params.rng_seed)
    picks = [leaf[rng.integers(len(leaf))] for leaf in octree_leaves(coords, params.k_max)]
    return np.sort(np.asarray(picks, dtype=np.int64))


def non_uniform_sample(stream: EventStream, window: tuple[int, int], params: SamplingParams) -> EventStream:
    t_start, t_end = window
    if t_start >= t_end:
        raise ValueError("window must satisfy t_start < t_end")
    sub = stream.window(t_start, t_end)
    if len(sub) == 0:
        return sub
    coords = np.stack([sub.x, sub.y, sub.t], axis=1).astype(np.float64)
    return sub.take(sample_indices(coords, params))
