"""Multi-category subgraph-trigger backdoor attacks on node classifiers,
with victims, defenses, baselines and an evaluation harness."""

from .attack import SubgraphBackdoor
from .baselines import SBABackdoor
from .defenses import EdgePruner, OutlierNodeFilter
from .graph import Graph, NodeSplit
from .models import GNNClassifier
from .pool import TriggerPool

__all__ = [
    "EdgePruner",
    "GNNClassifier",
    "Graph",
    "NodeSplit",
    "OutlierNodeFilter",
    "SBABackdoor",
    "SubgraphBackdoor",
    "TriggerPool",
]
__version__ = "0.1.0"
