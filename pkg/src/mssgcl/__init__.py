"""Multi-scale subgraph contrastive learning for graph-level representations."""

from .graph import Graph, GraphDataset, parse_tudataset, write_tudataset
from .trainer import TrainConfig, embed_dataset, train
from .probe import linear_probe_cv

__all__ = [
    "Graph",
    "GraphDataset",
    "parse_tudataset",
    "write_tudataset",
    "TrainConfig",
    "train",
    "embed_dataset",
    "linear_probe_cv",
]
