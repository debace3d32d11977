"""Embedded deformation graph: node sampling, influence weights, edge
regularization weights and the deformation map.

Node transforms are stored as a single ``(4 * n_nodes, 3)`` array ``X`` whose
``j``-th ``4 x 3`` block is ``[A_j^T; t_j^T]``. With that layout a point
``v`` influenced by node ``j`` maps to ``[v - p_j, 1] @ X_j + p_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .geometry import Surface, limited_geodesic


def identity_transforms(n_nodes: int) -> np.ndarray:
    X = np.zeros((n_nodes, 4, 3))
    X[:, :3, :] = np.eye(3)
    return X.reshape(4 * n_nodes, 3)


def transforms_from_affine(A, t) -> np.ndarray:
    """Stack per-node ``A_j`` (n, 3, 3) and ``t_j`` (n, 3) into the block layout."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 3)
    X = np.empty((len(A), 4, 3))
    X[:, :3, :] = np.transpose(A, (0, 2, 1))
    X[:, 3, :] = t
    return X.reshape(-1, 3)


def affine_from_transforms(X) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`transforms_from_affine`; returns ``(A, t)``."""
    blocks = np.asarray(X, dtype=np.float64).reshape(-1, 4, 3)
    return np.transpose(blocks[:, :3, :], (0, 2, 1)), blocks[:, 3, :].copy()


def pca_order(points) -> np.ndarray:
    """Indices sorted by projection onto the principal axis.

    The axis is the eigenvector of the largest covariance eigenvalue, with its
    sign fixed so the first nonzero component is positive. Ties keep index
    order. A degenerate (zero) covariance yields the identity permutation.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("pca_order needs at least one point")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / n
    if not np.any(cov):
        return np.arange(n)
    w, V = np.linalg.eigh(cov)
    axis = V[:, np.argmax(w)]
    nz = np.flatnonzero(np.abs(axis) > 1e-12)
    if axis[nz[0]] < 0:
        axis = -axis
    return np.argsort(centered @ axis, kind="stable")


def influence_weights(distances, radius: float) -> np.ndarray:
    """Normalized weights ``(1 - D^2/R^2)^3 / sum_k (1 - D_k^2/R^2)^3``."""
    d = np.asarray(distances, dtype=np.float64)
    raw = (1.0 - d * d / (radius * radius)) ** 3
    total = raw.sum()
    if total <= 0:
        raise ValueError("influence distances must all be below the radius")
    return raw / total


def influence_weight(distances, j: int, radius: float) -> float:
    """Weight of the ``j``-th entry of one point's influence set."""
    return float(influence_weights(distances, radius)[j])


@dataclass
class DeformationGraph:
    """Graph nodes on the source surface plus per-point influence data.

    Influence lists are stored in CSR form: entries ``infl_ptr[i]:infl_ptr[i+1]``
    of ``infl_node``/``infl_weight``/``infl_dist`` belong to source point ``i``.
    Directed neighbour pairs ``(reg_i[e], reg_j[e])`` carry weight ``reg_c[e]``.
    """

    source_points: np.ndarray
    node_indices: np.ndarray
    edges: np.ndarray
    infl_ptr: np.ndarray
    infl_node: np.ndarray
    infl_weight: np.ndarray
    infl_dist: np.ndarray
    radius: float
    reg_i: np.ndarray
    reg_j: np.ndarray
    reg_c: np.ndarray

    @property
    def node_positions(self) -> np.ndarray:
        return self.source_points[self.node_indices]

    @property
    def n_nodes(self) -> int:
        return len(self.node_indices)

    @property
    def n_points(self) -> int:
        return len(self.source_points)

    def influence(self, i: int) -> list[tuple[int, float]]:
        s, e = self.infl_ptr[i], self.infl_ptr[i + 1]
        return list(zip(self.infl_node[s:e].tolist(), self.infl_weight[s:e].tolist()))

    def deformation_matrix(self) -> sparse.csr_matrix:
        """Sparse ``F`` with row blocks ``alpha_ij * [v_i - p_j, 1]`` (|V| x 4|V_G|)."""
        if getattr(self, "_F", None) is None:
            rows = np.repeat(np.arange(self.n_points), np.diff(self.infl_ptr))
            nodes = self.infl_node
            a = self.infl_weight
            rel = self.source_points[rows] - self.node_positions[nodes]
            vals = np.concatenate([rel, np.ones((len(rows), 1))], axis=1) * a[:, None]
            cols = 4 * nodes[:, None] + np.arange(4)
            F = sparse.csr_matrix(
                (vals.ravel(), (np.repeat(rows, 4), cols.ravel())),
                shape=(self.n_points, 4 * self.n_nodes),
            )
            F.sort_indices()
            self._F = F
            P = np.zeros((self.n_points, 3))
            np.add.at(P, rows, a[:, None] * self.node_positions[nodes])
            self._P = P
        return self._F

    def anchor_offsets(self) -> np.ndarray:
        """``sum_j alpha_ij p_j`` per source point, so that positions are ``F X + P``."""
        self.deformation_matrix()
        return self._P

    def deformed_positions(self, X) -> np.ndarray:
        return self.deformation_matrix() @ np.asarray(X).reshape(-1, 3) + self.anchor_offsets()

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "nodes": [
                {"index": int(v), "position": p.tolist()}
                for v, p in zip(self.node_indices, self.node_positions)
            ],
            "edges": self.edges.tolist(),
            "influence": [
                [{"node": j, "weight": w} for j, w in self.influence(i)]
                for i in range(self.n_points)
            ],
            "reg_weights": [
                {"i": int(i), "j": int(j), "c": float(c)}
                for i, j, c in zip(self.reg_i, self.reg_j, self.reg_c)
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def deformed_position(i: int, graph: DeformationGraph, X) -> np.ndarray:
    """Deformed location of source point ``i`` (scalar reference path)."""
    blocks = np.asarray(X).reshape(-1, 4, 3)
    v = graph.source_points[i]
    out = np.zeros(3)
    for j, a in graph.influence(i):
        p = graph.node_positions[j]
        A, t = blocks[j, :3, :].T, blocks[j, 3, :]
        out += a * (A @ (v - p) + p + t)
    return out


def reg_weight_table(node_positions, edges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed neighbour pairs and their normalized inverse-length weights.

    Returns ``(i, j, c)`` over ``2 |E|`` directed pairs where
    ``c_ij = 2|E| / ||p_i - p_j|| / sum(1 / ||p_a - p_b||)``; the weights
    average to one.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    pos = np.asarray(node_positions, dtype=np.float64)
    di = np.concatenate([edges[:, 0], edges[:, 1]])
    dj = np.concatenate([edges[:, 1], edges[:, 0]])
    lengths = np.linalg.norm(pos[di] - pos[dj], axis=1)
    if np.any(lengths == 0):
        raise ValueError("coincident graph nodes: zero-length edge")
    inv = 1.0 / lengths
    c = 2 * len(edges) * inv / inv.sum()
    return di, dj, c


def build_graph(source: Surface, radius: float) -> DeformationGraph:
    """Greedy node sampling along the principal axis.

    Points are visited in :func:`pca_order`; a point becomes a node when no
    node influences it yet, and then influences every point within edge-graph
    distance ``radius``. Nodes sharing an influenced point are connected.
    """
    n = len(source.points)
    if n == 0:
        raise ValueError("cannot build a deformation graph on an empty surface")
    if radius <= 0:
        raise ValueError("radius must be positive")

    influence: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    nodes: list[int] = []
    for v in pca_order(source.points).tolist():
        if nodes and influence[v]:
            continue
        node_id = len(nodes)
        nodes.append(v)
        reached = limited_geodesic(source, v, radius)
        for q in sorted(reached):
            influence[q].append((node_id, reached[q]))
        assert influence[v], "a new node must influence itself"

    edge_set = set()
    for lst in influence:
        ids = sorted(j for j, _ in lst)
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                edge_set.add((ids[a], ids[b]))
    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)

    counts = np.array([len(lst) for lst in influence])
    ptr = np.concatenate([[0], np.cumsum(counts)])
    infl_node = np.empty(ptr[-1], dtype=np.int64)
    infl_dist = np.empty(ptr[-1])
    infl_weight = np.empty(ptr[-1])
    for i, lst in enumerate(influence):
        lst.sort()
        s = ptr[i]
        infl_node[s : s + len(lst)] = [j for j, _ in lst]
        infl_dist[s : s + len(lst)] = [d for _, d in lst]
        infl_weight[s : s + len(lst)] = influence_weights(infl_dist[s : s + len(lst)], radius)

    node_indices = np.array(nodes, dtype=np.int64)
    reg_i, reg_j, reg_c = reg_weight_table(source.points[node_indices], edges)
    return DeformationGraph(
        source_points=source.points,
        node_indices=node_indices,
        edges=edges,
        infl_ptr=ptr,
        infl_node=infl_node,
        infl_weight=infl_weight,
        infl_dist=infl_dist,
        radius=float(radius),
        reg_i=reg_i,
        reg_j=reg_j,
        reg_c=reg_c,
    )
