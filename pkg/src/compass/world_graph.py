"""Graph discretization of the unit-square workspace.

Nodes are sampled uniformly in [0,1]^2 and wired to their k nearest
neighbors (symmetrized); disconnected outputs are repaired by greedily
bridging components. The graph carries shortest-path distances and
spectral positional encodings and is immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from compass.errors import ConfigError, ContractViolation, InvalidInputError


@dataclass
class WorldGraph:
    """Immutable workspace graph.

    nodes: (K, 2) positions in [0,1]^2.
    adjacency: per-node sorted neighbor id lists (symmetric).
    edge_lengths: Euclidean length per undirected edge, keyed (u, v) with u < v.
    dist_matrix: (K, K) edge-length-weighted shortest-path distances.
    lap_pe: (K, d_pe) Laplacian eigenvector positional encodings.
    """

    nodes: np.ndarray
    adjacency: list[list[int]]
    edge_lengths: dict[tuple[int, int], float]
    dist_matrix: np.ndarray
    lap_pe: np.ndarray
    mean_edge_length: float
    seed: int | None = None
    k_nn: int | None = None
    _adj_matrix: np.ndarray = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_length(self, u: int, v: int) -> float:
        key = (u, v) if u < v else (v, u)
        try:
            return self.edge_lengths[key]
        except KeyError:
            raise InvalidInputError(f"no edge between {u} and {v}")

    def neighbors(self, u: int) -> list[int]:
        return self.adjacency[u]

    def adjacency_matrix(self) -> np.ndarray:
        """Dense binary adjacency (built on first use)."""
        if self._adj_matrix is None:
            K = self.n_nodes
            a = np.zeros((K, K))
            for u, nbrs in enumerate(self.adjacency):
                a[u, nbrs] = 1.0
            self._adj_matrix = a
        return self._adj_matrix


def sample_nodes(K: int, seed: int) -> np.ndarray:
    """Draw K node positions uniformly in the unit square, deterministically."""
    if K < 2:
        raise ConfigError(f"config key 'K': need at least 2 nodes, got {K}")
    rng = np.random.default_rng(seed)
    return rng.random((K, 2))


def build_knn_graph(points: np.ndarray, k: int, d_pe: int = 8,
                    seed: int | None = None) -> WorldGraph:
    """Symmetrized k-nearest-neighbor graph over the given points.

    Each node is linked to its k nearest Euclidean neighbors (distance ties
    broken by lower node id) and the directed relations are unioned. If the
    result is disconnected, the single shortest edge between two distinct
    components is added repeatedly until one component remains.
    """
    points = np.asarray(points, dtype=float)
    K = len(points)
    if k >= K:
        raise ConfigError(f"config key 'k_nn': need k < K, got k={k}, K={K}")
    if k < 1:
        raise ConfigError(f"config key 'k_nn': must be >= 1, got {k}")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    if np.any(dist[~np.eye(K, dtype=bool)] == 0.0):
        raise InvalidInputError("duplicate points in node set")

    edges: set[tuple[int, int]] = set()
    for u in range(K):
        order = np.argsort(dist[u], kind="stable")  # stable: ties go to lower id
        picked = [int(v) for v in order if v != u][:k]
        for v in picked:
            edges.add((min(u, v), max(u, v)))

    _repair_connectivity(K, dist, edges)

    adjacency: list[list[int]] = [[] for _ in range(K)]
    edge_lengths: dict[tuple[int, int], float] = {}
    for u, v in edges:
        adjacency[u].append(v)
        adjacency[v].append(u)
        edge_lengths[(u, v)] = float(dist[u, v])
    for lst in adjacency:
        lst.sort()

    dist_matrix = all_pairs_shortest_paths(adjacency, edge_lengths)
    lap_pe, _ = laplacian_positional_encoding(adjacency, d_pe)
    mean_edge = float(np.mean(list(edge_lengths.values())))
    return WorldGraph(
        nodes=points,
        adjacency=adjacency,
        edge_lengths=edge_lengths,
        dist_matrix=dist_matrix,
        lap_pe=lap_pe,
        mean_edge_length=mean_edge,
        seed=seed,
        k_nn=k,
    )


def _repair_connectivity(K: int, dist: np.ndarray, edges: set[tuple[int, int]]) -> None:
    """Add the globally shortest inter-component edge until connected."""
    while True:
        labels = _component_labels(K, edges)
        if labels.max() == 0:
            return
        cross = labels[:, None] != labels[None, :]
        masked = np.where(cross, dist, np.inf)
        u, v = np.unravel_index(np.argmin(masked), masked.shape)  # first min: lowest (u, v)
        edges.add((min(int(u), int(v)), max(int(u), int(v))))


def _component_labels(K: int, edges: set[tuple[int, int]]) -> np.ndarray:
    if not edges:
        return np.arange(K)
    rows = [u for u, v in edges] + [v for u, v in edges]
    cols = [v for u, v in edges] + [u for u, v in edges]
    mat = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(K, K))
    _, labels = connected_components(mat, directed=False)
    return labels


def all_pairs_shortest_paths(adjacency: list[list[int]],
                             edge_lengths: dict[tuple[int, int], float]) -> np.ndarray:
    """Edge-length-weighted all-pairs shortest path distances (Dijkstra)."""
    K = len(adjacency)
    rows, cols, vals = [], [], []
    for (u, v), w in edge_lengths.items():
        rows += [u, v]
        cols += [v, u]
        vals += [w, w]
    mat = csr_matrix((vals, (rows, cols)), shape=(K, K))
    d = shortest_path(mat, method="D", directed=False)
    if not np.all(np.isfinite(d)):
        raise ContractViolation("shortest paths infinite: graph is disconnected")
    return np.minimum(d, d.T)


def laplacian_positional_encoding(adjacency: list[list[int]],
                                  d_pe: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors of the symmetric-normalized Laplacian, smallest nonzero first.

    Returns (vectors (K, d_pe), eigenvalues (d_pe,)). Columns are unit-norm
    with the largest-magnitude entry made positive; the zero eigenvalue of a
    connected graph is excluded.
    """
    K = len(adjacency)
    if d_pe >= K:
        raise ConfigError(f"config key 'd_pe': need d_pe < K, got d_pe={d_pe}, K={K}")
    a = np.zeros((K, K))
    for u, nbrs in enumerate(adjacency):
        a[u, nbrs] = 1.0
    deg = a.sum(1)
    if np.any(deg == 0):
        raise ContractViolation("isolated node: graph is disconnected")
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(K) - dinv[:, None] * a * dinv[None, :]
    evals, evecs = np.linalg.eigh(lap)
    nonzero = evals > 1e-10
    idx = np.where(nonzero)[0][:d_pe]
    if len(idx) < d_pe:
        raise ContractViolation("too few nonzero Laplacian eigenvalues; disconnected graph?")
    vecs = evecs[:, idx]
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, j] = -col
    return vecs, evals[idx]


def graph_to_json(graph: WorldGraph) -> str:
    """Serialize as {nodes, edges, seed, k}; coordinates round-trip losslessly."""
    payload = {
        "nodes": [[float(x), float(y)] for x, y in graph.nodes],
        "edges": sorted([list(e) for e in graph.edge_lengths]),
        "seed": graph.seed,
        "k": graph.k_nn,
    }
    return json.dumps(payload)


def graph_from_json(text: str, d_pe: int = 8) -> WorldGraph:
    """Rebuild a graph exported by graph_to_json (derived fields recomputed)."""
    data = json.loads(text)
    points = np.asarray(data["nodes"], dtype=float)
    K = len(points)
    adjacency: list[list[int]] = [[] for _ in range(K)]
    edge_lengths: dict[tuple[int, int], float] = {}
    for u, v in data["edges"]:
        u, v = int(u), int(v)
        adjacency[u].append(v)
        adjacency[v].append(u)
        # same arithmetic as the builder's pairwise matrix, for bit-equality
        edge_lengths[(min(u, v), max(u, v))] = float(
            np.sqrt(((points[u] - points[v]) ** 2).sum(-1)))
    for lst in adjacency:
        lst.sort()
    dist_matrix = all_pairs_shortest_paths(adjacency, edge_lengths)
    lap_pe, _ = laplacian_positional_encoding(adjacency, d_pe)
    return WorldGraph(
        nodes=points,
        adjacency=adjacency,
        edge_lengths=edge_lengths,
        dist_matrix=dist_matrix,
        lap_pe=lap_pe,
        mean_edge_length=float(np.mean(list(edge_lengths.values()))),
        seed=data.get("seed"),
        k_nn=data.get("k"),
    )


def build_graph(K: int, k: int, seed: int, d_pe: int = 8) -> WorldGraph:
    """Sample K nodes and build the k-NN graph in one step."""
    return build_knn_graph(sample_nodes(K, seed), k, d_pe=d_pe, seed=seed)


def next_hop(graph: WorldGraph, u: int, target: int) -> int:
    """First move of a shortest path from u toward target (u if already there).

    Ties in path length resolve to the lower neighbor id.
    """
    if u == target:
        return u
    d = graph.dist_matrix
    best = min((graph.edge_length(u, v) + d[v, target], v) for v in graph.adjacency[u])
    return best[1]
