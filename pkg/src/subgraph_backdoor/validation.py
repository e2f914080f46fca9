"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .graph import Graph


def check_graph(graph, validate=True) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    if validate:
        graph.validate()
    return graph


def check_nodes(nodes, num_nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64).ravel()
    if nodes.size and (nodes.min() < 0 or nodes.max() >= num_nodes):
        raise ValueError(f"node id outside 0..{num_nodes - 1}")
    return nodes


def check_fraction(value, name, *, inclusive_high=False) -> float:
    value = float(value)
    ok = 0.0 <= value <= 1.0 if inclusive_high else 0.0 <= value < 1.0
    if not ok:
        raise ValueError(f"{name} must be in [0, 1{']' if inclusive_high else ')'}, got {value}")
    return value
