"""Event streams to spatio-temporal graphs, spline graph convolutions, Graph2Grid and a 3D CNN head."""

from .diffengine import DiffArray, backward, no_grad
from .event_io import Event, EventStream, read_stream, write_stream
from .graph_build import EventGraph, GraphParams, GraphSequence, build_graph, pair_distance, segment_stream
from .sampling import SamplingParams, non_uniform_sample

__version__ = "0.1.0"

__all__ = [
    "DiffArray", "backward", "no_grad",
    "Event", "EventStream", "read_stream", "write_stream",
    "EventGraph", "GraphParams", "GraphSequence", "build_graph", "pair_distance", "segment_stream",
    "SamplingParams", "non_uniform_sample",
]
