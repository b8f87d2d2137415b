"""Random-walk subgraph views at two scales.

A view keeps ``max(1, ceil(ratio * n))`` nodes collected by a uniform random
walk and all source edges among them. Local node ids follow ascending source
ids, so a ratio-1.0 view of a connected graph reproduces the source exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Graph


class Scale(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(eq=False)
class SubgraphView:
    graph: Graph
    source_index: int
    scale: Scale
    ratio: float
    node_map: np.ndarray


def node_budget(node_count: int, ratio: float) -> int:
    # round() strips float noise such as 0.7 * 10 == 7.000000000000001
    return min(node_count, max(1, math.ceil(round(ratio * node_count, 9))))


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a tuple of non-negative integer keys (seed, epoch, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def induced_subgraph(graph: Graph, nodes) -> tuple[Graph, np.ndarray]:
    node_map = np.sort(np.asarray(nodes, dtype=np.int64))
    local = np.full(graph.node_count, -1, dtype=np.int64)
    local[node_map] = np.arange(node_map.size)
    if graph.num_edges:
        keep = (local[graph.edges[:, 0]] >= 0) & (local[graph.edges[:, 1]] >= 0)
        edges = local[graph.edges[keep]]
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    sub = Graph(int(node_map.size), edges, graph.features[node_map].copy(), graph.label)
    return sub, node_map


def walk_nodes(graph: Graph, budget: int, rng: np.random.Generator, adjacency=None) -> list[int]:
    """Distinct nodes in first-visit order of a budget-limited random walk.

    Revisits move the walker without consuming budget. After ``10 * n`` steps
    without reaching the budget, or at a node with no neighbors, the walk
    jumps to an unvisited neighbor of a uniformly chosen collected node; when
    no collected node has one, a uniformly chosen unvisited node seeds a new walk.
    """
    n = graph.node_count
    adj = adjacency if adjacency is not None else graph.neighbors()
    current = int(rng.integers(n))
    collected = [current]
    seen = {current}
    step_cap = 10 * n
    steps = 0
    while len(collected) < budget:
        nbrs = adj[current]
        if nbrs and steps < step_cap:
            current = nbrs[int(rng.integers(len(nbrs)))]
            steps += 1
            if current not in seen:
                seen.add(current)
                collected.append(current)
            continue
        # Restart: prefer growing from the collected frontier.
        growable = [v for v in collected if any(u not in seen for u in adj[v])]
        if growable:
            anchor = growable[int(rng.integers(len(growable)))]
            options = [u for u in adj[anchor] if u not in seen]
            current = options[int(rng.integers(len(options)))]
        else:
            unvisited = [v for v in range(n) if v not in seen]
            current = unvisited[int(rng.integers(len(unvisited)))]
        seen.add(current)
        collected.append(current)
        steps = 0
    return collected


def sample_subgraph(
    graph: Graph,
    ratio: float,
    rng: np.random.Generator,
    *,
    source_index: int = -1,
    scale: Scale = Scale.GLOBAL,
    adjacency=None,
) -> SubgraphView:
    if graph.node_count < 1:
        raise ValueError("cannot sample a view of an empty graph")
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    budget = node_budget(graph.node_count, ratio)
    nodes = walk_nodes(graph, budget, rng, adjacency)
    sub, node_map = induced_subgraph(graph, nodes)
    return SubgraphView(sub, source_index, scale, ratio, node_map)


# (g_ratio, l_ratio) by dataset family, both as fractions of the source graph.
VIEW_RATIO_PRESETS = {"molecular": (0.8, 0.2), "social": (0.9, 0.1)}


def check_ratios(g_ratio: float, l_ratio: float) -> None:
    if not 0 < l_ratio <= g_ratio <= 1:
        raise ConfigError(
            f"view ratios must satisfy 0 < l_ratio <= g_ratio <= 1, got g_ratio={g_ratio}, l_ratio={l_ratio}"
        )


def make_views(
    graph: Graph,
    g_ratio: float,
    l_ratio: float,
    rng: np.random.Generator,
    source_index: int = -1,
) -> tuple[tuple[SubgraphView, SubgraphView], tuple[SubgraphView, SubgraphView]]:
    """Two global then two local views, drawn in the order g1, g2, l1, l2."""
    check_ratios(g_ratio, l_ratio)
    adj = graph.neighbors()
    g1, g2 = (
        sample_subgraph(graph, g_ratio, rng, source_index=source_index, scale=Scale.GLOBAL, adjacency=adj)
        for _ in range(2)
    )
    l1, l2 = (
        sample_subgraph(graph, l_ratio, rng, source_index=source_index, scale=Scale.LOCAL, adjacency=adj)
        for _ in range(2)
    )
    return (g1, g2), (l1, l2)
