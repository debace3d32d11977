"""Majorization-minimization registration loop with stabilized Anderson
acceleration and a coarse-to-fine schedule for the Welsch parameters."""

from __future__ import annotations

import logging
import math
import time
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .energy import (
    Landmarks,
    NumericalError,
    assemble_system,
    evaluate_energy,
    find_correspondences,
    rotations_of,
    solve_system,
)
from .geometry import SpatialIndex, Surface, build_spatial_index
from .graph import DeformationGraph, build_graph, identity_transforms

logger = logging.getLogger(__name__)

NU_R_FLOOR = 1e-8
# relative slack when comparing nu_a against its lower bound
_NU_RTOL = 1e-9


@dataclass
class SolverConfig:
    k_alpha: float = 100.0
    k_beta: float = 1.0
    eps: float = 1e-5
    max_iter: int = 100
    anderson_m: int = 5
    radius_mult: float = 5.0
    nu_a_init: float | None = None
    nu_a_min: float | None = None
    nu_r_init: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.anderson_m < 0:
            raise ValueError("anderson_m must be non-negative")
        if self.k_alpha < 0 or self.k_beta < 0:
            raise ValueError("k_alpha and k_beta must be non-negative")
        if not self.radius_mult > 0:
            raise ValueError("radius_mult must be positive")


@dataclass
class Schedule:
    nu_a: float
    nu_r: float
    nu_a_min: float
    alpha: float
    beta: float


def energy_weights(k_alpha, k_beta, n_points, n_edges, n_nodes, nu_a, nu_r) -> tuple[float, float]:
    """Resolution-independent ``alpha``/``beta`` from the user multipliers."""
    if n_edges == 0:
        if k_alpha:
            warnings.warn("deformation graph has no edges; regularization disabled", stacklevel=2)
        alpha = 0.0
    else:
        alpha = k_alpha * (n_points / n_edges) * (nu_r * nu_r) / (nu_a * nu_a)
    beta = k_beta * (n_points / n_nodes) / (2.0 * nu_a * nu_a)
    return alpha, beta


def median_initial_distance(source_points, target: SpatialIndex) -> float:
    _, d = target.query(source_points)
    return float(np.median(d))


def init_parameters(
    graph: DeformationGraph,
    target: SpatialIndex,
    avg_edge_length: float,
    config: SolverConfig,
) -> Schedule:
    """Initial Welsch parameters, their lower bound and the matching weights.

    ``nu_a`` starts at the median source-to-target distance (never below the
    bound ``avg_edge_length / sqrt(3)``); ``nu_r`` starts at three average
    edge lengths.
    """
    nu_a_min = config.nu_a_min if config.nu_a_min is not None else avg_edge_length / math.sqrt(3)
    if config.nu_a_init is not None:
        nu_a = config.nu_a_init
    else:
        nu_a = median_initial_distance(graph.source_points, target)
    nu_a = max(nu_a, nu_a_min)
    nu_r = config.nu_r_init if config.nu_r_init is not None else 3.0 * avg_edge_length
    if not (nu_a_min > 0 and nu_r > 0):
        raise ValueError("Welsch parameters must be positive (is the average edge length zero?)")
    alpha, beta = energy_weights(
        config.k_alpha, config.k_beta, graph.n_points, len(graph.edges), graph.n_nodes, nu_a, nu_r
    )
    return Schedule(nu_a, nu_r, nu_a_min, alpha, beta)


def anneal(nu_a: float, nu_r: float, nu_a_min: float) -> tuple[float, float, bool]:
    """Halve both parameters; ``done`` when ``nu_a`` already sat at its bound."""
    if nu_a <= nu_a_min * (1 + _NU_RTOL):
        return nu_a_min, nu_r, True
    half = nu_a / 2
    nu_a_next = nu_a_min if half <= nu_a_min * (1 + _NU_RTOL) else half
    return nu_a_next, max(nu_r / 2, NU_R_FLOOR), False


def anderson_combine(G_hist, F_hist, m: int) -> np.ndarray:
    """Anderson extrapolation from the newest ``m + 1`` fixed-point evaluations.

    ``G_hist``/``F_hist`` hold ``G(X)`` and ``G(X) - X`` oldest first. Solves
    ``min_theta |F_k - dF theta|`` where column ``j`` of ``dF`` is
    ``F_(k-j+1) - F_(k-j)`` and returns ``G_k - dG theta``.
    """
    G = [np.asarray(g, dtype=np.float64).ravel() for g in G_hist]
    F = [np.asarray(f, dtype=np.float64).ravel() for f in F_hist]
    mk = min(len(G) - 1, m)
    g_k, f_k = G[-1], F[-1]
    if mk <= 0:
        return g_k.copy()
    dF = np.stack([F[-j] - F[-j - 1] for j in range(1, mk + 1)], axis=1)
    dG = np.stack([G[-j] - G[-j - 1] for j in range(1, mk + 1)], axis=1)
    Q, R = np.linalg.qr(dF)
    diag = np.abs(np.diag(R))
    if diag.min() > 1e-12 * max(diag.max(), 1e-300):
        theta = np.linalg.solve(R, Q.T @ f_k)
    else:
        # rank deficient: Tikhonov-regularized normal equations
        N = dF.T @ dF
        N[np.diag_indices_from(N)] += 1e-10 * (1.0 + N.diagonal().max())
        theta = np.linalg.solve(N, dF.T @ f_k)
    return g_k - dG @ theta


@dataclass
class IterationRecord:
    E: float
    E_align: float
    E_reg: float
    E_rot: float
    E_landmark: float
    kind: str  # "init", "mm" or "aa": how the evaluated iterate was produced
    accepted: bool
    aa_accepted: bool
    n_solves: int
    max_disp: float | None = None


@dataclass
class StageReport:
    nu_a: float
    nu_r: float
    alpha: float
    beta: float
    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    n_solves: int = 0
    degenerate_rotations: int = 0
    wall_time: float = 0.0

    def accepted_energies(self) -> list[float]:
        return [r.E for r in self.iterations if r.accepted]


@dataclass
class RegistrationReport:
    n_points: int
    n_nodes: int
    n_graph_edges: int
    radius: float
    stages: list[StageReport] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = asdict(self)
        if not include_timings:
            d.pop("timings")
            for s in d["stages"]:
                s.pop("wall_time")
        return d


@dataclass
class RegistrationResult:
    X: np.ndarray
    deformed: np.ndarray
    report: RegistrationReport
    graph: DeformationGraph
    schedule: Schedule


class Registration:
    """Fixed source graph, target and optional landmarks; runs MM stages."""

    def __init__(self, graph: DeformationGraph, target: SpatialIndex | np.ndarray):
        self.graph = graph
        self.target = target if isinstance(target, SpatialIndex) else build_spatial_index(target)

    def mm_step(self, X, alpha, beta, nu_a, nu_r, landmarks=None) -> np.ndarray:
        """One majorization step ``G(X)`` computed from scratch."""
        v = self.graph.deformed_positions(X)
        corr = find_correspondences(v, self.target)
        rots, _ = rotations_of(X)
        system = assemble_system(X, self.graph, corr, rots, alpha, beta, nu_a, nu_r, landmarks)
        return solve_system(system)

    def run_stage(
        self,
        X,
        nu_a: float,
        nu_r: float,
        alpha: float,
        beta: float,
        *,
        max_iter: int,
        eps: float,
        m: int,
        landmarks: Landmarks | None = None,
    ) -> tuple[np.ndarray, StageReport]:
        """Iterate at fixed ``(nu_a, nu_r)`` until displacement < ``eps`` or ``max_iter`` solves.

        An Anderson iterate is kept only if it lowers the energy; otherwise the
        plain MM iterate it was extrapolated from replaces it. Correspondences
        and rotations computed while testing an accepted iterate are reused
        for its MM step.
        """
        t0 = time.perf_counter()
        graph = self.graph
        report = StageReport(nu_a, nu_r, alpha, beta)
        hist_G: deque = deque(maxlen=m + 1)
        hist_F: deque = deque(maxlen=m + 1)
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        v_cur = graph.deformed_positions(X)
        v_prev = None
        kind = "init"
        E_prev = math.inf
        X_mm = v_mm = None
        stop = False

        while True:
            if not np.all(np.isfinite(X)):
                raise NumericalError("non-finite iterate")
            corr = find_correspondences(v_cur, self.target)
            rots, smin = rotations_of(X)
            en = evaluate_energy(X, graph, corr, rots, alpha, beta, nu_a, nu_r, landmarks)
            rec = IterationRecord(
                en.total, en.align, en.reg, en.rot, en.landmark, kind,
                accepted=True, aa_accepted=(kind == "aa"), n_solves=report.n_solves,
            )
            report.iterations.append(rec)
            if kind == "aa" and en.total > E_prev:
                rec.accepted = rec.aa_accepted = False
                X, v_cur, kind = X_mm, v_mm, "mm"
                disp = float(np.sqrt(((v_cur - v_prev) ** 2).sum(axis=1).max()))
                report.iterations[-2].max_disp = disp
                stop = disp < eps or report.n_solves >= max_iter
                continue
            E_prev = en.total
            report.degenerate_rotations += int((smin < 1e-12).sum())
            if stop:
                report.converged = disp < eps
                break

            system = assemble_system(X, graph, corr, rots, alpha, beta, nu_a, nu_r, landmarks)
            X_mm = solve_system(system)
            report.n_solves += 1
            v_mm = graph.deformed_positions(X_mm)
            hist_G.append(X_mm.ravel())
            hist_F.append(X_mm.ravel() - X.ravel())
            if m > 0 and len(hist_G) > 1:
                X_next = anderson_combine(hist_G, hist_F, m).reshape(-1, 3)
                v_next = graph.deformed_positions(X_next)
                kind = "aa"
            else:
                X_next, v_next, kind = X_mm, v_mm, "mm"
            disp = float(np.sqrt(((v_next - v_cur) ** 2).sum(axis=1).max()))
            rec.max_disp = disp
            v_prev = v_cur
            X, v_cur = X_next, v_next
            stop = disp < eps or report.n_solves >= max_iter

        report.wall_time = time.perf_counter() - t0
        return X, report


def register(
    source: Surface,
    target: Surface | np.ndarray,
    config: SolverConfig | None = None,
    *,
    graph: DeformationGraph | None = None,
    landmarks: Landmarks | None = None,
) -> RegistrationResult:
    """Deform ``source`` onto ``target`` (both assumed already normalized).

    Starts from identity node transforms and runs one MM/Anderson stage per
    value of ``nu_a``, halving ``nu_a`` and ``nu_r`` between stages until
    ``nu_a`` reaches its lower bound. Landmarks, if given, only act in the
    first stage.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    if source.avg_edge_length <= 0:
        raise ValueError("source surface needs edges with positive length")
    if graph is None:
        graph = build_graph(source, config.radius_mult * source.avg_edge_length)
    t_graph = time.perf_counter() - t0
    target_pts = target.points if isinstance(target, Surface) else np.asarray(target)
    problem = Registration(graph, target_pts)
    sched = init_parameters(graph, problem.target, source.avg_edge_length, config)
    report = RegistrationReport(graph.n_points, graph.n_nodes, len(graph.edges), graph.radius)

    X = identity_transforms(graph.n_nodes)
    nu_a, nu_r = sched.nu_a, sched.nu_r
    stage = 0
    while True:
        alpha, beta = energy_weights(
            config.k_alpha, config.k_beta, graph.n_points, len(graph.edges), graph.n_nodes,
            nu_a, nu_r,
        )
        X, st = problem.run_stage(
            X, nu_a, nu_r, alpha, beta,
            max_iter=config.max_iter, eps=config.eps, m=config.anderson_m,
            landmarks=landmarks if stage == 0 else None,
        )
        report.stages.append(st)
        logger.info(
            "stage %d: nu_a=%.4g nu_r=%.4g solves=%d E=%.6g",
            stage, nu_a, nu_r, st.n_solves, st.accepted_energies()[-1],
        )
        nu_a, nu_r, done = anneal(nu_a, nu_r, sched.nu_a_min)
        if done:
            break
        stage += 1

    sched.alpha, sched.beta = alpha, beta
    sched.nu_a, sched.nu_r = report.stages[-1].nu_a, report.stages[-1].nu_r
    report.timings = {"graph": t_graph, "total": time.perf_counter() - t0}
    return RegistrationResult(X, graph.deformed_positions(X), report, graph, sched)
