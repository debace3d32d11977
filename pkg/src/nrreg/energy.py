"""Welsch-robust registration energy and its quadratic majorizer.

The energy of node transforms ``X`` is

    E(X) = sum_i psi_a(|v_i(X) - u_rho(i)|)
         + alpha * sum_(i,j) psi_r(|D_ij(X)|)
         + beta * sum_j |A_j - proj_SO3(A_j)|_F^2

with ``psi_nu(x) = 1 - exp(-x^2 / (2 nu^2))``. Around an iterate ``X_k`` every
term is bounded by a quadratic, so one majorization step is a single sparse
symmetric positive definite solve ``K X = B``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import SpatialIndex, project_to_rotation_batch
from .graph import DeformationGraph

DENSE_SOLVE_LIMIT = 4000


class NumericalError(RuntimeError):
    """Raised when the linear system cannot be factorized or the iterate blows up."""


def welsch(x, nu):
    x = np.asarray(x, dtype=np.float64)
    return -np.expm1(-(x * x) / (2.0 * nu * nu))


def welsch_surrogate(x, y, nu):
    """Quadratic upper bound of :func:`welsch` touching it at ``x == y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    psi_y = welsch(y, nu)
    return psi_y + (1.0 - psi_y) / (2.0 * nu * nu) * (x * x - y * y)


def _welsch_sq(sq, nu):
    return -np.expm1(-sq / (2.0 * nu * nu))


@dataclass
class Correspondences:
    index: np.ndarray
    points: np.ndarray
    sq_dist: np.ndarray


def find_correspondences(deformed, target: SpatialIndex) -> Correspondences:
    idx, dist = target.query(deformed)
    return Correspondences(idx, target.points[idx], dist * dist)


@dataclass
class Landmarks:
    """Fixed source-to-target pairs added as plain squared residuals."""

    source_index: np.ndarray
    target_points: np.ndarray
    weight: float = 1.0


@dataclass
class EnergyBreakdown:
    total: float
    align: float
    reg: float
    rot: float
    alpha: float
    beta: float
    nu_a: float
    nu_r: float
    landmark: float = 0.0


@dataclass
class LinearSystem:
    K: sparse.csr_matrix
    B: np.ndarray


class _Structure:
    """Static matrices and the fixed sparsity pattern of ``K`` for one graph."""

    def __init__(self, graph: DeformationGraph):
        self.F = graph.deformation_matrix()
        self.P = graph.anchor_offsets()
        nn = graph.n_nodes
        dim = 4 * nn
        self.dim = dim
        pos = graph.node_positions

        # regularization rows: D_e = H_e X - Y_e
        ne = len(graph.reg_c)
        c = graph.reg_c
        rel = pos[graph.reg_i] - pos[graph.reg_j]
        hcols = np.empty((ne, 5), dtype=np.int64)
        hcols[:, :4] = 4 * graph.reg_j[:, None] + np.arange(4)
        hcols[:, 4] = 4 * graph.reg_i + 3
        hvals = np.empty((ne, 5))
        hvals[:, :3] = c[:, None] * rel
        hvals[:, 3] = c
        hvals[:, 4] = -c
        self.H = sparse.csr_matrix(
            (hvals.ravel(), (np.repeat(np.arange(ne), 5), hcols.ravel())), shape=(ne, dim)
        )
        self.Y = c[:, None] * rel

        # alignment blocks: for every point, every pair of its influence entries
        counts = np.diff(graph.infl_ptr)
        point_of = np.repeat(np.arange(graph.n_points), counts)
        reps = counts[point_of]
        pa = np.repeat(np.arange(len(point_of)), reps)
        offs = np.arange(len(pa)) - np.repeat(np.cumsum(reps) - reps, reps)
        pb = graph.infl_ptr[point_of[pa]] + offs
        src = graph.source_points
        f = np.concatenate(
            [src[point_of] - pos[graph.infl_node], np.ones((len(point_of), 1))], axis=1
        ) * graph.infl_weight[:, None]
        a_rows = (4 * graph.infl_node[pa])[:, None, None] + np.arange(4)[None, :, None]
        a_cols = (4 * graph.infl_node[pb])[:, None, None] + np.arange(4)[None, None, :]
        a_vals = f[pa][:, :, None] * f[pb][:, None, :]
        self.a_point = np.repeat(point_of[pa], 16)
        a_rows = np.broadcast_to(a_rows, a_vals.shape).ravel()
        a_cols = np.broadcast_to(a_cols, a_vals.shape).ravel()
        self.a_vals = a_vals.ravel()

        r_rows = np.broadcast_to(hcols[:, :, None], (ne, 5, 5)).ravel()
        r_cols = np.broadcast_to(hcols[:, None, :], (ne, 5, 5)).ravel()
        self.r_vals = (hvals[:, :, None] * hvals[:, None, :]).ravel()
        self.r_edge = np.repeat(np.arange(ne), 25)

        j_idx = (4 * np.arange(nn)[:, None] + np.arange(3)).ravel()

        rows = np.concatenate([a_rows, r_rows, j_idx])
        cols = np.concatenate([a_cols, r_cols, j_idx])
        keys, inverse = np.unique(rows * dim + cols, return_inverse=True)
        na, nr = len(a_rows), len(r_rows)
        self.a_slot = inverse[:na]
        self.r_slot = inverse[na : na + nr]
        self.j_slot = inverse[na + nr :]
        self.nnz = len(keys)
        krows, kcols = keys // dim, keys % dim
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(krows, minlength=dim))])
        self.indices = kcols
        self.J_diag = np.zeros(dim)
        self.J_diag[j_idx] = 1.0

    def assemble_K(self, w_point, w_edge, alpha, beta) -> sparse.csr_matrix:
        data = np.bincount(self.a_slot, self.a_vals * w_point[self.a_point], self.nnz)
        if alpha != 0 and len(self.r_slot):
            data += alpha * np.bincount(self.r_slot, self.r_vals * w_edge[self.r_edge], self.nnz)
        data += beta * np.bincount(self.j_slot, minlength=self.nnz)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.dim, self.dim))


def structure(graph: DeformationGraph) -> _Structure:
    s = getattr(graph, "_structure", None)
    if s is None:
        s = _Structure(graph)
        graph._structure = s
    return s


def rotations_of(X) -> tuple[np.ndarray, np.ndarray]:
    """Projections ``proj_SO3(A_j)`` of every node block and their smallest singular values."""
    blocks = np.asarray(X).reshape(-1, 4, 3)
    A = np.transpose(blocks[:, :3, :], (0, 2, 1))
    return project_to_rotation_batch(A)


def reg_residuals(X, graph: DeformationGraph) -> np.ndarray:
    """``D_ij`` for all directed neighbour pairs, shape ``(2|E|, 3)``."""
    s = structure(graph)
    return s.H @ np.asarray(X).reshape(-1, 3) - s.Y


def _landmark_terms(X, graph, landmarks):
    s = structure(graph)
    rows = s.F[landmarks.source_index]
    v = rows @ X + s.P[landmarks.source_index]
    return v, ((v - landmarks.target_points) ** 2).sum()


def evaluate_energy(
    X,
    graph: DeformationGraph,
    corr: Correspondences,
    rotations,
    alpha: float,
    beta: float,
    nu_a: float,
    nu_r: float,
    landmarks: Landmarks | None = None,
) -> EnergyBreakdown:
    """Energy at ``X`` given the correspondences and rotation projections at ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (4 * graph.n_nodes, 3):
        raise ValueError(f"X has shape {X.shape}, expected {(4 * graph.n_nodes, 3)}")
    if len(corr.sq_dist) != graph.n_points:
        raise ValueError("correspondence count does not match the source point count")
    rotations = np.asarray(rotations).reshape(-1, 3, 3)
    if len(rotations) != graph.n_nodes:
        raise ValueError("rotation count does not match the node count")
    e_align = float(_welsch_sq(corr.sq_dist, nu_a).sum())
    if len(graph.reg_c):
        D = reg_residuals(X, graph)
        e_reg = float(_welsch_sq((D * D).sum(axis=1), nu_r).sum())
    else:
        e_reg = 0.0
    A_t = X.reshape(-1, 4, 3)[:, :3, :]
    e_rot = float(((A_t - np.transpose(rotations, (0, 2, 1))) ** 2).sum())
    e_land = 0.0
    if landmarks is not None and len(landmarks.source_index):
        e_land = landmarks.weight * float(_landmark_terms(X, graph, landmarks)[1])
    total = e_align + alpha * e_reg + beta * e_rot + e_land
    return EnergyBreakdown(total, e_align, e_reg, e_rot, alpha, beta, nu_a, nu_r, e_land)


def alignment_weights(sq_dist, nu_a):
    """``exp(-d^2 / (2 nu^2)) / (2 nu^2)``: the IRLS weight of each alignment residual."""
    return np.exp(-np.asarray(sq_dist) / (2 * nu_a * nu_a)) / (2 * nu_a * nu_a)


def assemble_system(
    X,
    graph: DeformationGraph,
    corr: Correspondences,
    rotations,
    alpha: float,
    beta: float,
    nu_a: float,
    nu_r: float,
    landmarks: Landmarks | None = None,
) -> LinearSystem:
    """Normal equations of the quadratic majorizer at ``X``.

    ``K = F^T Wa F + alpha H^T Wr H + beta J``,
    ``B = F^T Wa Q + alpha H^T Wr Y + beta J Z`` with ``Q = u - P``.
    """
    s = structure(graph)
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    w_a = alignment_weights(corr.sq_dist, nu_a)
    rhs_pts = w_a[:, None] * (corr.points - s.P)
    w_point = w_a
    if landmarks is not None and len(landmarks.source_index):
        w_point = w_a.copy()
        np.add.at(w_point, landmarks.source_index, landmarks.weight)
        np.add.at(
            rhs_pts,
            landmarks.source_index,
            landmarks.weight * (landmarks.target_points - s.P[landmarks.source_index]),
        )
    if len(graph.reg_c):
        D = reg_residuals(X, graph)
        w_r = alignment_weights((D * D).sum(axis=1), nu_r)
    else:
        w_r = np.zeros(0)
    K = s.assemble_K(w_point, w_r, alpha, beta)
    B = s.F.T @ rhs_pts
    if len(w_r) and alpha != 0:
        B += alpha * (s.H.T @ (w_r[:, None] * s.Y))
    Z = np.zeros((graph.n_nodes, 4, 3))
    Z[:, :3, :] = np.transpose(np.asarray(rotations).reshape(-1, 3, 3), (0, 2, 1))
    B += beta * Z.reshape(-1, 3)
    return LinearSystem(K, B)


def _offending_block(K: sparse.csr_matrix) -> int | None:
    Kd = K.tocsr()
    for j in range(K.shape[0] // 4):
        blk = Kd[4 * j : 4 * j + 4, 4 * j : 4 * j + 4].toarray()
        if np.linalg.eigvalsh(blk).min() <= 1e-14 * max(1.0, np.abs(blk).max()):
            return j
    return None


def solve_system(system: LinearSystem) -> np.ndarray:
    """Solve ``K X = B`` for the next node transforms."""
    K, B = system.K, system.B
    if not np.all(np.isfinite(K.data)) or not np.all(np.isfinite(B)):
        raise NumericalError("non-finite entries in the linear system")
    try:
        if K.shape[0] <= DENSE_SOLVE_LIMIT:
            factor = scipy.linalg.cho_factor(K.toarray(), lower=True, check_finite=False)
            X = scipy.linalg.cho_solve(factor, B, check_finite=False)
        else:
            lu = splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")
            if np.any(lu.U.diagonal() <= 0):
                raise np.linalg.LinAlgError("non-positive pivot")
            X = lu.solve(B)
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        j = _offending_block(K)
        where = f" (node {j} has a singular diagonal block)" if j is not None else ""
        raise NumericalError(f"system matrix is not positive definite{where}: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise NumericalError("linear solve produced non-finite values")
    return X


def surrogate_energy(
    X,
    Xk,
    graph: DeformationGraph,
    target: SpatialIndex,
    alpha: float,
    beta: float,
    nu_a: float,
    nu_r: float,
) -> float:
    """Majorizer of the energy built at ``Xk``, with all constant terms kept.

    Reference evaluation term by term; equals the energy at ``X == Xk`` and
    bounds it from above elsewhere.
    """
    X = np.asarray(X, dtype=np.float64)
    vk = graph.deformed_positions(Xk)
    corr_k = find_correspondences(vk, target)
    rot_k, _ = rotations_of(Xk)
    v = graph.deformed_positions(X)
    yk = np.sqrt(corr_k.sq_dist)
    xa = np.linalg.norm(v - corr_k.points, axis=1)
    total = float(welsch_surrogate(xa, yk, nu_a).sum())
    if len(graph.reg_c):
        dk = np.linalg.norm(reg_residuals(Xk, graph), axis=1)
        dx = np.linalg.norm(reg_residuals(X, graph), axis=1)
        total += alpha * float(welsch_surrogate(dx, dk, nu_r).sum())
    A_t = X.reshape(-1, 4, 3)[:, :3, :]
    total += beta * float(((A_t - np.transpose(rot_k, (0, 2, 1))) ** 2).sum())
    return total
