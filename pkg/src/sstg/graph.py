"""Multi-point interaction topology.

Edges are ordered pairs ``(j, i)`` meaning node j influences node i, so the
neighborhood of i is its set of in-neighbours.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

STRATEGIES = ("full", "knn", "radius")
DEFAULT_STRATEGY = "knn"
DEFAULT_K = 4


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Neighborhood:
    center: int
    members: frozenset


@dataclass(frozen=True, eq=False)
class TactileGraph:
    """Immutable directed graph over N planar sensor positions."""

    coords: np.ndarray
    edges: tuple
    strategy: str = "custom"
    param: float | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        n = coords.shape[0]
        edges = tuple(sorted({(int(j), int(i)) for j, i in self.edges}))
        for j, i in edges:
            if j == i:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= j < n and 0 <= i < n):
                raise GraphError(f"edge ({j}, {i}) out of range for {n} nodes")
        object.__setattr__(self, "edges", edges)

    @property
    def node_count(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TactileGraph):
            return NotImplemented
        return self.edges == other.edges and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash((self.edges, self.coords.tobytes()))

    def edge_index(self):
        """(src, dst) integer arrays, one entry per edge, in sorted edge order."""
        if not self.edges:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        arr = np.asarray(self.edges, dtype=np.int64)
        return arr[:, 0].copy(), arr[:, 1].copy()

    def adjacency(self) -> np.ndarray:
        """Dense A with A[i, j] = 1 iff (j, i) is an edge."""
        a = np.zeros((self.node_count, self.node_count), dtype=np.int8)
        for j, i in self.edges:
            a[i, j] = 1
        return a

    def permuted(self, perm) -> "TactileGraph":
        """Relabel so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        edges = [(inv[j], inv[i]) for j, i in self.edges]
        return TactileGraph(self.coords[perm], edges, self.strategy, self.param)

    def to_dict(self) -> dict:
        return {
            "coords": self.coords.tolist(),
            "edges": [list(e) for e in self.edges],
            "strategy": self.strategy,
            "param": self.param,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TactileGraph":
        return cls(np.asarray(d["coords"]), [tuple(e) for e in d["edges"]],
                   d.get("strategy", "custom"), d.get("param"))


def build_graph(coords, strategy: str = DEFAULT_STRATEGY, param=None) -> TactileGraph:
    """Construct edges from node coordinates.

    Args:
        coords: (N, 2) positions.
        strategy: ``"full"`` (every ordered pair), ``"knn"`` ((j, i) iff j is
            one of the ``param`` nearest nodes to i, ties to the lower index)
            or ``"radius"`` ((j, i) iff distance <= ``param``).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise GraphError(f"coords must be (N, 2), got {coords.shape}")
    n = coords.shape[0]
    if n < 2:
        raise GraphError(f"need at least 2 nodes, got {n}")
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))

    if strategy == "full":
        edges = [(j, i) for i in range(n) for j in range(n) if j != i]
    elif strategy == "knn":
        k = DEFAULT_K if param is None else int(param)
        if not 1 <= k <= n - 1:
            raise GraphError(f"knn requires 1 <= k <= {n - 1}, got {k}")
        edges = []
        for i in range(n):
            others = [j for j in range(n) if j != i]
            # lexsort key: distance first, index second
            order = sorted(others, key=lambda j: (dist[i, j], j))
            edges.extend((j, i) for j in order[:k])
        param = k
    elif strategy == "radius":
        if param is None or not float(param) > 0:
            raise GraphError(f"radius requires a positive param, got {param}")
        param = float(param)
        edges = [(j, i) for i in range(n) for j in range(n) if j != i and dist[i, j] <= param]
    else:
        raise GraphError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return TactileGraph(coords, edges, strategy, param)


def neighborhood(g: TactileGraph, i: int) -> Neighborhood:
    if not 0 <= i < g.node_count:
        raise GraphError(f"node {i} out of range for {g.node_count} nodes")
    return Neighborhood(i, frozenset(j for j, dst in g.edges if dst == i))


def load_layout(path=None) -> np.ndarray:
    """Read ``id,x,y`` records; the bundled 24-node hand layout when ``path`` is None."""
    if path is None:
        text = resources.files("sstg").joinpath("data/hand24.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise GraphError("layout file has no records")
    ids = [int(r["id"]) for r in rows]
    if sorted(ids) != list(range(len(ids))):
        raise GraphError("layout ids must be 0..N-1 without gaps")
    coords = np.zeros((len(rows), 2))
    for r in rows:
        coords[int(r["id"])] = float(r["x"]), float(r["y"])
    return coords


def default_graph(n_nodes: int = 24, strategy: str = DEFAULT_STRATEGY, param=DEFAULT_K) -> TactileGraph:
    """Graph on the bundled hand layout, or a ring layout when ``n_nodes`` != 24."""
    if n_nodes == 24:
        coords = load_layout()
    else:
        angle = 2 * np.pi * np.arange(n_nodes) / n_nodes
        coords = np.stack([np.cos(angle), np.sin(angle)], axis=1) * n_nodes / (2 * np.pi)
    if strategy == "knn":
        param = min(int(param), n_nodes - 1)
    return build_graph(coords, strategy, param)
