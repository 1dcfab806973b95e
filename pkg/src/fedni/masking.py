"""Self-supervised node hiding for training the missing-node generator."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .graphcons import PopulationGraph, induced_subgraph

logger = logging.getLogger(__name__)

DEFAULT_TARGET = 0.125
DEFAULT_N_MAX = 5


@dataclass
class MaskEpisode:
    """A corrupted graph plus the exact ground truth for what was hidden.

    ``retained`` and ``masked`` index the source graph. ``hidden[i]`` lists the
    source indices of masked neighbors of corrupted-graph node ``i``.
    """

    source: PopulationGraph
    corrupted: PopulationGraph
    retained: np.ndarray
    masked: np.ndarray
    hidden: list[np.ndarray]
    masked_count: np.ndarray
    n_max: int
    reached_target: bool = True

    @property
    def masked_fraction(self) -> float:
        return len(self.masked) / self.source.n

    def hidden_features(self, i: int) -> np.ndarray:
        return self.source.X[self.hidden[i]]

    def parent_slots(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (parent in corrupted graph, hidden source index) pairs."""
        parents = np.concatenate([np.full(len(h), i, dtype=np.int64) for i, h in enumerate(self.hidden)]
                                 ) if self.hidden else np.zeros(0, dtype=np.int64)
        targets = np.concatenate(self.hidden) if self.hidden else np.zeros(0, dtype=np.int64)
        return parents, targets.astype(np.int64)


def neighbor_lists(A: np.ndarray) -> list[np.ndarray]:
    off = (A != 0) & ~np.eye(A.shape[0], dtype=bool)
    return [np.flatnonzero(row) for row in off]


def bfs_tree(A_or_graph, root: int) -> tuple[np.ndarray, np.ndarray]:
    """BFS depth and parent of every node, unweighted on nonzero off-diagonal entries.

    Unreachable nodes get depth -1 and parent -1.
    """
    A = A_or_graph.A if isinstance(A_or_graph, PopulationGraph) else np.asarray(A_or_graph)
    n = A.shape[0]
    if not 0 <= root < n:
        raise IndexError(f"root {root} not in graph of {n} nodes")
    nbrs = neighbor_lists(A)
    depth = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    depth[root] = 0
    q = deque([root])
    while q:
        u = q.popleft()
        for v in nbrs[u]:
            if depth[v] < 0:
                depth[v] = depth[u] + 1
                parent[v] = u
                q.append(v)
    return depth, parent


def is_connected(A: np.ndarray) -> bool:
    n = A.shape[0]
    if n <= 1:
        return True
    depth, _ = bfs_tree(A, 0)
    return bool((depth >= 0).all())


def _episode(G: PopulationGraph, masked: np.ndarray, n_max: int, reached: bool) -> MaskEpisode:
    masked = np.sort(np.asarray(masked, dtype=np.int64))
    keep = np.ones(G.n, dtype=bool)
    keep[masked] = False
    retained = np.flatnonzero(keep)
    corrupted = induced_subgraph(G, retained)
    is_masked = ~keep
    off = (G.A != 0) & ~np.eye(G.n, dtype=bool)
    hidden = [np.flatnonzero(off[r] & is_masked) for r in retained]
    counts = np.array([len(h) for h in hidden], dtype=np.float64)
    masked_count = np.clip(counts / n_max, 0.0, 1.0)
    return MaskEpisode(source=G, corrupted=corrupted, retained=retained, masked=masked,
                       hidden=hidden, masked_count=masked_count, n_max=n_max,
                       reached_target=reached)


def mask_leaves(G: PopulationGraph, root: int, target_fraction: float = DEFAULT_TARGET,
                rng_seed=None, n_max: int = DEFAULT_N_MAX) -> MaskEpisode:
    """Hide BFS leaves, deepest layer first, until ``target_fraction`` is reached.

    A node is removable when none of its BFS children remain, so the retained
    BFS tree always spans the retained nodes and the graph stays connected. It is
    also skipped if removing it would leave an already hidden node with no
    retained neighbor.
    """
    if not 0 < target_fraction < 0.5:
        raise ValueError("target_fraction must lie in (0, 0.5)")
    rng = np.random.default_rng(rng_seed)
    depth, parent = bfs_tree(G.A, root)
    goal = math.ceil(target_fraction * G.n - 1e-9)
    live_children = np.zeros(G.n, dtype=np.int64)
    for v in range(G.n):
        if parent[v] >= 0:
            live_children[parent[v]] += 1
    nbrs = neighbor_lists(G.A)
    keep = np.ones(G.n, dtype=bool)
    masked: list[int] = []
    max_depth = int(depth.max())
    for b in range(max_depth, 0, -1):
        if len(masked) >= goal:
            break
        layer = np.flatnonzero(depth == b)
        layer = layer[rng.permutation(len(layer))]
        for v in layer:
            if len(masked) >= goal:
                break
            if live_children[v] > 0:
                continue
            # each hidden node must keep at least one retained neighbor to act as its parent
            orphans = [m for m in nbrs[v] if not keep[m] and keep[nbrs[m]].sum() < 2]
            if orphans:
                continue
            masked.append(int(v))
            keep[v] = False
            live_children[parent[v]] -= 1
    reached = len(masked) >= goal
    if not reached:
        logger.warning("BFS masking reached %d of %d nodes without disconnecting", len(masked), goal)
    return _episode(G, np.array(masked, dtype=np.int64), n_max, reached)


def random_mask(G: PopulationGraph, target_fraction: float = DEFAULT_TARGET, rng_seed=None,
                n_max: int = DEFAULT_N_MAX) -> MaskEpisode:
    """Uniformly random node hiding at the same fraction; connectivity is not protected."""
    rng = np.random.default_rng(rng_seed)
    goal = math.ceil(target_fraction * G.n - 1e-9) if target_fraction > 0 else 0
    masked = rng.choice(G.n, size=goal, replace=False) if goal else np.zeros(0, dtype=np.int64)
    return _episode(G, masked, n_max, True)
