"""Weighted k-nearest-neighbour graph over node descriptors.

Directed k-NN edges are symmetrised by union, weighted with a Gaussian
kernel exp(-d^2 / rho^2) where rho is the mean edge distance damped by the
node count, and normalised with self-loops for use as the network's
propagation operator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .features import FeatureMatrix

_GRAPH_MAGIC = b"GMGR"

# Rows per block when forming pairwise distances, bounds peak memory.
_KNN_BLOCK = 256


class GraphError(Exception):
    """Graph-construction contract violation."""


@dataclass(eq=False)
class SparseGraph:
    """Symmetric weighted adjacency without self-loops.

    ``edges`` holds each undirected edge once as (i, j) with i < j;
    ``adjacency`` is the full symmetric CSR matrix. ``rho`` records the
    kernel bandwidth; the edge count convention (undirected, counted once)
    is stored in the on-disk metadata.
    """

    num_nodes: int
    edges: np.ndarray      # (m, 2) int64, i < j
    distances: np.ndarray  # (m,)
    weights: np.ndarray    # (m,), in (0, 1]
    rho: float
    adjacency: sparse.csr_array

    @staticmethod
    def from_edges(num_nodes: int, edges, weights, distances=None,
                   rho: float = 1.0) -> "SparseGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed in the adjacency")
        if np.any(weights <= 0.0) or np.any(weights > 1.0):
            raise GraphError("edge weights must lie in (0, 1]")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        edges = np.stack([lo, hi], axis=1)
        if distances is None:
            distances = np.zeros(len(edges))
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        data = np.concatenate([weights, weights])
        adjacency = sparse.csr_array(
            (data, (rows, cols)), shape=(num_nodes, num_nodes))
        return SparseGraph(num_nodes=num_nodes, edges=edges,
                           distances=np.asarray(distances, dtype=np.float64),
                           weights=weights, rho=rho, adjacency=adjacency)


@dataclass(eq=False)
class NormalizedAdjacency:
    """Self-loop symmetric-normalised propagation operator."""

    num_nodes: int
    matrix: sparse.csr_array


def knn(features, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours per node by Euclidean distance.

    Self is excluded, ties fall to the smaller node index. Returns
    (neighbours, distances), both (N, k), ordered nearest first.
    """
    x = features.values if isinstance(features, FeatureMatrix) else \
        np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise GraphError("feature matrix must be 2-D")
    n = x.shape[0]
    if k < 1 or k >= n:
        raise GraphError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    if not np.all(np.isfinite(x)):
        raise GraphError("feature rows must be finite")

    sq = np.einsum("ij,ij->i", x, x)
    neighbours = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k))
    for start in range(0, n, _KNN_BLOCK):
        stop = min(start + _KNN_BLOCK, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        d = np.sqrt(d2)
        d[np.arange(start, stop) - start, np.arange(start, stop)] = np.inf
        # Stable sort keeps ascending index order among equal distances.
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        neighbours[start:stop] = order
        distances[start:stop] = np.take_along_axis(d, order, axis=1)
    return neighbours, distances


def compute_rho(distances, num_nodes: int) -> float:
    """Kernel bandwidth: mean edge distance with the node count in the
    denominator, over undirected edges counted once. All-zero distances
    fall back to 1 to keep the kernel defined."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise GraphError("empty edge set")
    rho = float(distances.sum()) / (distances.size + num_nodes)
    return 1.0 if rho == 0.0 else rho


def gaussian_weight(distance, rho: float):
    """exp(-d^2 / rho^2); 1 at zero distance."""
    if rho <= 0:
        raise GraphError("rho must be positive")
    d = np.asarray(distance, dtype=np.float64)
    out = np.exp(-(d / rho) ** 2)
    return float(out) if np.isscalar(distance) else out


def build_graph(features, k: int = 30) -> SparseGraph:
    """k-NN graph symmetrised by union, Gaussian edge weights."""
    neighbours, dists = knn(features, k)
    n = neighbours.shape[0]
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = neighbours.ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    flat = dists.ravel()
    order = np.lexsort((flat, hi, lo))
    pairs = np.stack([lo[order], hi[order]], axis=1)
    keep = np.ones(len(pairs), dtype=bool)
    keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    edges = pairs[keep]
    edge_dists = flat[order][keep]
    rho = compute_rho(edge_dists, n)
    # The floor guards against exp underflow on extreme outlier distances.
    weights = np.maximum(gaussian_weight(edge_dists, rho), np.finfo(np.float64).tiny)
    return SparseGraph.from_edges(n, edges, weights, distances=edge_dists, rho=rho)


def normalize(graph: SparseGraph) -> NormalizedAdjacency:
    """Scale the self-loop-augmented adjacency by its degrees on both sides,
    so every row and column is divided by sqrt(degree). Self-loops guarantee
    strictly positive degrees."""
    n = graph.num_nodes
    a_tilde = (graph.adjacency + sparse.eye_array(n, format="csr")).tocoo()
    degrees = np.zeros(n)
    np.add.at(degrees, a_tilde.row, a_tilde.data)
    # One square root of the degree product keeps unit-degree cases exact.
    data = a_tilde.data / np.sqrt(degrees[a_tilde.row] * degrees[a_tilde.col])
    matrix = sparse.csr_array((data, (a_tilde.row, a_tilde.col)), shape=(n, n))
    return NormalizedAdjacency(num_nodes=n, matrix=matrix)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_GRAPH_HEADER = struct.Struct("<4sIQ")  # magic, N, nnz


def save_graph(graph: SparseGraph, path, k: int | None = None) -> None:
    """Binary CSR (row offsets int64, column indices int32, weights float64)
    plus a JSON sidecar recording rho and the edge-count convention."""
    csr = graph.adjacency
    header = _GRAPH_HEADER.pack(_GRAPH_MAGIC, graph.num_nodes, csr.nnz)
    payload = (header
               + np.asarray(csr.indptr, dtype="<i8").tobytes()
               + np.asarray(csr.indices, dtype="<i4").tobytes()
               + np.asarray(csr.data, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(payload)
    meta = {
        "num_nodes": graph.num_nodes,
        "num_edges_undirected": int(len(graph.edges)),
        "rho": graph.rho,
        "rho_edge_convention": "undirected edges counted once, after union symmetrisation",
        "k": k,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_graph(path) -> SparseGraph:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _GRAPH_HEADER.size or data[:4] != _GRAPH_MAGIC:
        raise GraphError(f"{path}: not a graph file")
    _, n, nnz = _GRAPH_HEADER.unpack_from(data)
    offset = _GRAPH_HEADER.size
    indptr = np.frombuffer(data, dtype="<i8", count=n + 1, offset=offset)
    offset += indptr.nbytes
    indices = np.frombuffer(data, dtype="<i4", count=nnz, offset=offset)
    offset += indices.nbytes
    values = np.frombuffer(data, dtype="<f8", count=nnz, offset=offset)
    adjacency = sparse.csr_array(
        (values.copy(), indices.astype(np.int64), indptr.astype(np.int64)),
        shape=(n, n))
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    coo = sparse.triu(adjacency, k=1).tocoo()
    edges = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
    return SparseGraph(num_nodes=n, edges=edges,
                       distances=np.zeros(len(edges)), weights=coo.data,
                       rho=float(meta["rho"]), adjacency=adjacency)


def export_edges_text(graph: SparseGraph, path) -> None:
    """Text export, one 'i j w' line per undirected edge."""
    with open(path, "w") as fh:
        for (i, j), w in zip(graph.edges, graph.weights):
            fh.write(f"{i} {j} {float(w)!r}\n")
