"""Robust non-rigid registration with an embedded deformation graph."""

from .energy import Landmarks, NumericalError, welsch, welsch_surrogate
from .geometry import Normalization, SpatialIndex, Surface, normalize_pair, project_to_rotation
from .graph import DeformationGraph, build_graph
from .metrics import overlap_ratio, pointwise_error, rmse, scene_flow_rmse
from .solver import RegistrationResult, SolverConfig, anderson_combine, register

__all__ = [
    "DeformationGraph",
    "Landmarks",
    "Normalization",
    "NumericalError",
    "RegistrationResult",
    "SolverConfig",
    "SpatialIndex",
    "Surface",
    "anderson_combine",
    "build_graph",
    "normalize_pair",
    "overlap_ratio",
    "pointwise_error",
    "project_to_rotation",
    "register",
    "rmse",
    "scene_flow_rmse",
    "welsch",
    "welsch_surrogate",
]

__version__ = "0.1.0"
