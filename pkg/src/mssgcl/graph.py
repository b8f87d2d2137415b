"""Graph and dataset types plus a reader/writer for the TUDataset text layout.

The TUDataset layout stores a whole corpus as a few comma separated files
(``<DS>_A.txt``, ``<DS>_graph_indicator.txt``, ...) with one global 1-based
node numbering. Parsing splits that numbering back into per-graph 0-based ids.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[,\s]+")


class DatasetError(Exception):
    """Base class for dataset parsing failures."""


class ParseError(DatasetError):
    pass


class IntegrityError(DatasetError):
    pass


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph.

    ``edges`` is an ``(E, 2)`` integer array of unordered pairs stored as
    ``(min, max)``; ``features`` is ``(node_count, feature_dim)``.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.edges = np.sort(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), axis=1)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(self.node_count, -1)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for i, j in self.edges.tolist():
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        if self.num_edges:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def permute(self, perm) -> "Graph":
        """Relabel nodes so old node ``perm[k]`` becomes new node ``k``."""
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        return Graph(self.node_count, inverse[self.edges], self.features[perm], self.label)

    def equals(self, other: "Graph") -> bool:
        return (
            self.node_count == other.node_count
            and self.label == other.label
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class GraphDataset:
    name: str
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    # "node_labels" or "degree"; the writer needs it to round-trip features.
    feature_source: str = "node_labels"
    self_loops_dropped: int = 0
    raw_label_values: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.graphs:
            raise IntegrityError(f"dataset {self.name!r} has no graphs")
        for k, g in enumerate(self.graphs):
            if g.feature_dim != self.feature_dim:
                raise IntegrityError(
                    f"graph {k} has feature_dim {g.feature_dim}, expected {self.feature_dim}"
                )
            if g.label is not None and not 0 <= g.label < self.num_classes:
                raise IntegrityError(f"graph {k} label {g.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs], dtype=np.int64)

    def has_labels(self) -> bool:
        return all(g.label is not None for g in self.graphs)

    def equals(self, other: "GraphDataset") -> bool:
        return (
            self.name == other.name
            and self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
            and len(self.graphs) == len(other.graphs)
            and all(a.equals(b) for a, b in zip(self.graphs, other.graphs))
        )


def degree_onehot_features(graph: Graph, max_degree: int) -> np.ndarray:
    deg = np.minimum(graph.degrees(), max_degree)
    out = np.zeros((graph.node_count, max_degree + 1))
    out[np.arange(graph.node_count), deg] = 1.0
    return out


def validate_graph(graph: Graph) -> list[str]:
    """Return human-readable invariant violations; empty when the graph is well formed."""
    problems = []
    seen = set()
    for k, (i, j) in enumerate(graph.edges.tolist()):
        if not (0 <= i < graph.node_count and 0 <= j < graph.node_count):
            problems.append(f"edge {k} ({i}, {j}) out of range [0, {graph.node_count})")
            continue
        if i == j:
            problems.append(f"edge {k} ({i}, {j}) is a self-loop")
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            problems.append(f"edge {k} ({i}, {j}) duplicates an earlier edge")
        seen.add(key)
    if graph.features.shape[0] != graph.node_count:
        problems.append(
            f"features have {graph.features.shape[0]} rows, node_count is {graph.node_count}"
        )
    return problems


def _read_ints(path: Path, width: int | None = None) -> list[list[int]]:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = [t for t in _TOKEN_SPLIT.split(text) if t]
            try:
                values = [int(t) for t in tokens]
            except ValueError:
                raise ParseError(f"{path.name}:{lineno}: non-integer token in {text!r}") from None
            if width is not None and len(values) != width:
                raise ParseError(f"{path.name}:{lineno}: expected {width} values, got {len(values)}")
            rows.append(values)
    return rows


def parse_tudataset(directory, dataset_name: str) -> GraphDataset:
    directory = Path(directory)

    def path_for(suffix):
        return directory / f"{dataset_name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator"):
        if not path_for(suffix).is_file():
            raise ParseError(f"missing mandatory file {path_for(suffix).name} in {directory}")

    indicator = [r[0] for r in _read_ints(path_for("graph_indicator"), width=1)]
    if not indicator:
        raise ParseError(f"{path_for('graph_indicator').name} is empty")
    num_graphs = max(indicator)
    if min(indicator) < 1:
        raise IntegrityError("graph ids in the indicator file must be >= 1")

    # Global node k (0-based) -> (graph index, local index).
    counts = [0] * num_graphs
    local_id = []
    for gid in indicator:
        local_id.append(counts[gid - 1])
        counts[gid - 1] += 1
    if any(c == 0 for c in counts):
        empty = counts.index(0) + 1
        raise IntegrityError(f"graph {empty} has no nodes in the indicator file")

    directed: dict[tuple[int, int], int] = {}
    order: list[tuple[int, int]] = []
    self_loops = 0
    a_path = path_for("A")
    with a_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = [t for t in _TOKEN_SPLIT.split(text) if t]
            try:
                i, j = (int(t) for t in tokens)
            except ValueError:
                raise ParseError(f"{a_path.name}:{lineno}: expected two integers, got {text!r}") from None
            n_total = len(indicator)
            if not (1 <= i <= n_total and 1 <= j <= n_total):
                raise IntegrityError(f"{a_path.name}:{lineno}: node id outside [1, {n_total}]")
            if indicator[i - 1] != indicator[j - 1]:
                raise IntegrityError(
                    f"{a_path.name}:{lineno}: edge ({i}, {j}) crosses graphs "
                    f"{indicator[i - 1]} and {indicator[j - 1]}"
                )
            if i == j:
                self_loops += 1
                continue
            if (i, j) in directed:
                raise IntegrityError(f"{a_path.name}:{lineno}: duplicate directed edge ({i}, {j})")
            directed[(i, j)] = lineno
            key = (min(i, j), max(i, j))
            if (j, i) not in directed:
                order.append(key)

    for (i, j), lineno in directed.items():
        if (j, i) not in directed:
            raise IntegrityError(f"{a_path.name}:{lineno}: edge ({i}, {j}) has no reverse direction")
    if self_loops:
        log.warning("%s: dropped %d self-loop lines", dataset_name, self_loops)

    per_graph_edges: list[list[tuple[int, int]]] = [[] for _ in range(num_graphs)]
    for i, j in order:
        g = indicator[i - 1] - 1
        a, b = local_id[i - 1], local_id[j - 1]
        per_graph_edges[g].append((min(a, b), max(a, b)))

    labels: list[int | None] = [None] * num_graphs
    num_classes = 1
    raw_values: list[int] = []
    if path_for("graph_labels").is_file():
        raw = [r[0] for r in _read_ints(path_for("graph_labels"), width=1)]
        if len(raw) != num_graphs:
            raise IntegrityError(
                f"{path_for('graph_labels').name} has {len(raw)} lines, expected {num_graphs}"
            )
        raw_values = sorted(set(raw))
        remap = {v: k for k, v in enumerate(raw_values)}
        labels = [remap[v] for v in raw]
        num_classes = len(raw_values)

    node_labels = None
    if path_for("node_labels").is_file():
        node_raw = [r[0] for r in _read_ints(path_for("node_labels"), width=1)]
        if len(node_raw) != len(indicator):
            raise IntegrityError(
                f"{path_for('node_labels').name} has {len(node_raw)} lines, expected {len(indicator)}"
            )
        values = sorted(set(node_raw))
        remap = {v: k for k, v in enumerate(values)}
        node_labels = np.array([remap[v] for v in node_raw], dtype=np.int64)
        feature_dim = len(values)

    # Nodes of a graph are contiguous only if the indicator is sorted; gather explicitly.
    members: list[list[int]] = [[] for _ in range(num_graphs)]
    for k, gid in enumerate(indicator):
        members[gid - 1].append(k)

    graphs = []
    for g in range(num_graphs):
        n = counts[g]
        edges = np.array(per_graph_edges[g], dtype=np.int64).reshape(-1, 2)
        if node_labels is not None:
            feats = np.zeros((n, feature_dim))
            feats[np.arange(n), node_labels[members[g]]] = 1.0
        else:
            feats = np.zeros((n, 0))
        graphs.append(Graph(n, edges, feats, labels[g]))

    source = "node_labels"
    if node_labels is None:
        source = "degree"
        max_degree = max(int(g.degrees().max()) for g in graphs)
        for g in graphs:
            g.features = degree_onehot_features(g, max_degree)
        feature_dim = max_degree + 1

    return GraphDataset(
        name=dataset_name,
        graphs=graphs,
        num_classes=num_classes,
        feature_dim=feature_dim,
        feature_source=source,
        self_loops_dropped=self_loops,
        raw_label_values=raw_values,
    )


def write_tudataset(dataset: GraphDataset, directory, dataset_name: str | None = None) -> Path:
    """Serialize ``dataset`` in TUDataset layout; returns the directory written."""
    name = dataset_name or dataset.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, node_lines = [], [], []
    offset = 0
    for gid, g in enumerate(dataset.graphs, start=1):
        ind_lines.extend([str(gid)] * g.node_count)
        for i, j in g.edges.tolist():
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        if dataset.feature_source == "node_labels":
            node_lines.extend(str(int(v)) for v in g.features.argmax(axis=1))
        offset += g.node_count

    def dump(suffix, lines):
        (directory / f"{name}_{suffix}.txt").write_text("".join(line + "\n" for line in lines))

    dump("A", a_lines)
    dump("graph_indicator", ind_lines)
    if dataset.has_labels():
        dump("graph_labels", [str(g.label) for g in dataset.graphs])
    if dataset.feature_source == "node_labels":
        dump("node_labels", node_lines)
    return directory
