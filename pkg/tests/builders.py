"""Small hand-built graphs shared by the CLI and acceptance tests."""
import numpy as np

from fxemu.graph import Graph, Node

EXTREME = 127 / 64   # quantizes to raw 127 at WL 8, FL 6


def overflow_probe(channels: int = 4) -> Graph:
    """1x1 conv over ``channels`` inputs with every weight at EXTREME.

    Fed with EXTREME everywhere, each partial sum grows by 127*127, so a
    16-bit accumulator (WL 8 + 8, no guard) wraps from the third term on.
    """
    w = np.full((1, channels, 1, 1), EXTREME, np.float32)
    node = Node("probe", "Conv2D", ["x", "probe.w"], "y", {"stride": [1, 1], "pad": [0, 0]})
    return Graph([node], {"x": (1, channels, 2, 2)}, ["y"], {"probe.w": w})


def probe_inputs(channels: int = 4, count: int = 2) -> np.ndarray:
    return np.full((count, channels, 2, 2), EXTREME, np.float32)
