"""Geometric primitives: surfaces, closest-point queries, bounded geodesics
and projection onto the rotation group."""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEFAULT_KNN = 6


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {pts.shape}")
    return pts


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges ``(i, j)`` with ``i < j`` of a triangle list."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def knn_edges(points, k: int = DEFAULT_KNN) -> np.ndarray:
    """Symmetric k-nearest-neighbour connectivity.

    ``(i, j)`` is an edge when ``j`` is among the ``k`` nearest neighbours of
    ``i`` or vice versa. Returned edges satisfy ``i < j`` and are unique.
    """
    pts = _as_points(points)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    # brute force ranking for the stable index tie-break
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1) if n <= 2000 else None
    if d2 is not None:
        np.fill_diagonal(d2, np.inf)
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    else:
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=k + 1)
        nbrs = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            row = [j for j in idx[i] if j != i][:k]
            nbrs[i] = row
    rows = np.repeat(np.arange(n), k)
    e = np.sort(np.stack([rows, nbrs.ravel()], axis=1), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


@dataclass
class Surface:
    """Sample points with optional triangles and neighbour edges.

    When ``faces`` is given the edges are the unique triangle edges; otherwise
    they come from :func:`knn_edges`. Pass ``edges`` explicitly to override.
    """

    points: np.ndarray
    faces: np.ndarray | None = None
    edges: np.ndarray | None = None
    knn: int = DEFAULT_KNN
    avg_edge_length: float = field(init=False)

    def __post_init__(self):
        self.points = _as_points(self.points)
        n = len(self.points)
        if self.faces is not None:
            self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
            if len(self.faces) == 0:
                self.faces = None
            elif self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError("face index out of range")
        if self.edges is None:
            if self.faces is not None:
                self.edges = edges_from_faces(self.faces)
            elif n > 1:
                self.edges = knn_edges(self.points, min(self.knn, n - 1))
            else:
                self.edges = np.zeros((0, 2), dtype=np.int64)
        else:
            e = np.sort(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), axis=1)
            e = e[e[:, 0] != e[:, 1]]
            self.edges = np.unique(e, axis=0)
            if len(self.edges) and self.edges.max() >= n:
                raise ValueError("edge index out of range")
        if len(self.edges):
            lengths = np.linalg.norm(
                self.points[self.edges[:, 0]] - self.points[self.edges[:, 1]], axis=1
            )
            self.avg_edge_length = float(lengths.mean())
        else:
            self.avg_edge_length = 0.0
        self._adjacency = None

    def __len__(self):
        return len(self.points)

    @property
    def adjacency(self) -> list[list[tuple[int, float]]]:
        """Per-vertex list of ``(neighbour, edge length)``, neighbours ascending."""
        if self._adjacency is None:
            adj = [[] for _ in range(len(self.points))]
            lengths = np.linalg.norm(
                self.points[self.edges[:, 0]] - self.points[self.edges[:, 1]], axis=1
            )
            for (a, b), w in zip(self.edges.tolist(), lengths.tolist()):
                adj[a].append((b, w))
                adj[b].append((a, w))
            for nb in adj:
                nb.sort()
            self._adjacency = adj
        return self._adjacency

    def copy_with_points(self, points) -> "Surface":
        """Same connectivity, new coordinates (edges are kept, not recomputed)."""
        return Surface(np.asarray(points, dtype=np.float64).copy(), self.faces, self.edges)


class SpatialIndex:
    """Exact nearest-neighbour queries over a fixed point set.

    Backed by a k-d tree; candidate distances are re-ranked with the same
    arithmetic as an exhaustive scan so equidistant points resolve to the
    smallest index.
    """

    _CANDIDATES = 4

    def __init__(self, points):
        pts = _as_points(points)
        if len(pts) == 0:
            raise ValueError("cannot build a spatial index over an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indexed point for every query row; returns ``(indices, distances)``."""
        q = _as_points(queries)
        k = min(self._CANDIDATES, len(self.points))
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand).reshape(len(q), k)
        d2 = ((self.points[cand] - q[:, None, :]) ** 2).sum(-1)
        best = d2.min(axis=1)
        # smallest index among exact minimisers
        masked = np.where(d2 == best[:, None], cand, np.iinfo(np.int64).max)
        idx = masked.min(axis=1)
        if k < len(self.points):
            # every candidate tied: there may be more equidistant points outside the k
            full = np.all(d2 == best[:, None], axis=1)
            for r in np.flatnonzero(full):
                near = self._tree.query_ball_point(q[r], np.sqrt(best[r]) * (1 + 1e-12) + 1e-300)
                near = np.asarray(near, dtype=np.int64)
                dd = ((self.points[near] - q[r]) ** 2).sum(-1)
                idx[r] = near[dd == dd.min()].min()
                best[r] = dd.min()
        return idx.astype(np.int64), np.sqrt(best)


def build_spatial_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def closest_point(index: SpatialIndex, q) -> tuple[int, float]:
    """Index of and distance to the indexed point nearest to ``q``."""
    idx, dist = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return int(idx[0]), float(dist[0])


def limited_geodesic(surface: Surface, source_index: int, radius: float) -> dict[int, float]:
    """Edge-graph shortest-path distances from one vertex, truncated at ``radius``.

    A breadth-first search first collects the connected neighbourhood of
    points whose Euclidean distance to the source is below ``radius``. Since
    Euclidean distance never exceeds path length, every point with path
    distance below ``radius`` lies in that neighbourhood, so Dijkstra is run
    only on it. Returns ``{index: distance}`` for distances strictly below
    ``radius``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(surface.points)
    if not 0 <= source_index < n:
        raise IndexError(f"source index {source_index} out of range")
    pts = surface.points
    adj = surface.adjacency
    origin = pts[source_index]
    r2 = radius * radius

    ball = {source_index}
    queue = deque([source_index])
    while queue:
        a = queue.popleft()
        for b, _ in adj[a]:
            if b not in ball:
                d = pts[b] - origin
                if d @ d < r2:
                    ball.add(b)
                    queue.append(b)

    dist = {source_index: 0.0}
    done = set()
    heap = [(0.0, source_index)]
    while heap:
        d, a = heapq.heappop(heap)
        if a in done:
            continue
        done.add(a)
        for b, w in adj[a]:
            if b not in ball:
                continue
            nd = d + w
            if nd < radius and nd < dist.get(b, np.inf):
                dist[b] = nd
                heapq.heappush(heap, (nd, b))
    return dist


def project_to_rotation(A) -> np.ndarray:
    """Closest rotation matrix to ``A`` in the Frobenius norm.

    With ``A = U S V^T`` the minimiser is ``U diag(1, 1, det(U V^T)) V^T``.
    """
    A = np.asarray(A, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A)
    if s[-1] < 1e-12:
        logger.debug("rotation projection of a near-singular matrix (sigma_min=%g)", s[-1])
    if np.linalg.det(U @ Vt) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
    return U @ Vt


def project_to_rotation_batch(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project_to_rotation` over a ``(n, 3, 3)`` stack.

    Returns the rotations and the smallest singular value of each input.
    """
    A = np.asarray(A, dtype=np.float64)
    U, s, Vt = np.linalg.svd(A)
    flip = np.linalg.det(U @ Vt) < 0
    if flip.any():
        U = U.copy()
        U[flip, :, -1] = -U[flip, :, -1]
    return U @ Vt, s[:, -1]


@dataclass
class Normalization:
    """Similarity transform ``x -> (x - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def normalize_pair(source: Surface, target: Surface) -> tuple[Normalization, Surface, Surface]:
    """Scale and translate both surfaces so their joint bounding box has unit diagonal.

    The same transform is applied to both; it is returned so results can be
    mapped back to the original frame and metrics reported in original units
    (original = normalized / scale).
    """
    if len(source.points) == 0 or len(target.points) == 0:
        raise ValueError("cannot normalize an empty surface")
    allp = np.vstack([source.points, target.points])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0:
        raise ValueError("degenerate input: joint bounding box has zero diagonal")
    norm = Normalization(center=(lo + hi) / 2, scale=1.0 / diag)
    return norm, source.copy_with_points(norm.apply(source.points)), target.copy_with_points(
        norm.apply(target.points)
    )
