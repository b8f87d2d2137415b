from pathlib import Path

import numpy as np
import pytest

from mssgcl.graph import Graph, GraphDataset, degree_onehot_features, parse_tudataset

DATA_DIR = Path(__file__).parent / "data"
MUTAG_DIR = DATA_DIR / "MUTAG"


def path_graph(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def make_graph(n: int, edges, label=None, feature_dim: int | None = None) -> Graph:
    g = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), np.zeros((n, 0)), label)
    g.features = degree_onehot_features(g, feature_dim - 1 if feature_dim else max(1, int(g.degrees().max())))
    return g


def random_graph(rng: np.random.Generator, n: int, p: float, feature_dim: int = 4) -> Graph:
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    g = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), rng.normal(size=(n, feature_dim)))
    return g


def synthetic_dataset(num_graphs: int = 20) -> GraphDataset:
    """Class 0: two triangles joined by a path. Class 1: a plain path. Sizes vary."""
    graphs = []
    for k in range(num_graphs):
        if k % 2 == 0:
            bridge = 1 + (k // 2) % 4
            n = 6 + bridge - 1
            edges = [(0, 1), (1, 2), (0, 2)]
            chain = [2] + list(range(6, 6 + bridge - 1)) + [3]
            edges += list(zip(chain[:-1], chain[1:]))
            edges += [(3, 4), (4, 5), (3, 5)]
            graphs.append(make_graph(n, edges, label=0, feature_dim=4))
        else:
            n = 6 + (k // 2) % 5
            graphs.append(make_graph(n, path_graph(n), label=1, feature_dim=4))
    return GraphDataset("SYNTH", graphs, num_classes=2, feature_dim=4, feature_source="degree")


@pytest.fixture
def synth():
    return synthetic_dataset()


@pytest.fixture(scope="session")
def mutag():
    return parse_tudataset(MUTAG_DIR, "MUTAG")
