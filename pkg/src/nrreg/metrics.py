"""Registration accuracy metrics."""

from __future__ import annotations

import numpy as np


def pointwise_error(deformed, reference) -> np.ndarray:
    """Distance from each deformed point to its ground-truth counterpart.

    ``reference`` is either the corresponding target positions (same length as
    ``deformed``) or a ``(target_points, indices)`` pair mapping every source
    point to a target sample.
    """
    deformed = np.asarray(deformed, dtype=np.float64)
    if isinstance(reference, tuple):
        pts, idx = reference
        reference = np.asarray(pts, dtype=np.float64)[np.asarray(idx)]
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != deformed.shape:
        raise ValueError(f"shape mismatch: {deformed.shape} vs {reference.shape}")
    return np.linalg.norm(deformed - reference, axis=1)


def rmse(errors, scale: float = 1.0) -> float:
    """Root mean square of per-point errors.

    ``scale`` is the normalization factor (normalized = original * scale), so
    the result is in original units when errors are measured normalized.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("rmse of an empty error set")
    return float(np.sqrt(np.mean(e * e))) / scale


def scene_flow_rmse(deformed, source, flows: dict[int, np.ndarray] | tuple, scale: float = 1.0) -> float:
    """RMSE of deformed points against ``source + flow`` over points that have a flow.

    ``flows`` maps source index to displacement, or is an ``(indices, vectors)`` pair.
    """
    if isinstance(flows, dict):
        idx = np.fromiter(flows.keys(), dtype=np.int64, count=len(flows))
        vec = np.array([flows[i] for i in idx.tolist()], dtype=np.float64).reshape(-1, 3)
    else:
        idx, vec = np.asarray(flows[0], dtype=np.int64), np.asarray(flows[1], dtype=np.float64)
    if len(idx) == 0:
        raise ValueError("no scene flow vectors given")
    deformed = np.asarray(deformed, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    err = np.linalg.norm(deformed[idx] - (source[idx] + vec), axis=1)
    return rmse(err, scale)


def overlap_ratio(gt_index, target_membership) -> float:
    """Fraction of source points whose ground-truth counterpart survives in the target.

    ``gt_index[i]`` is the complete-target vertex corresponding to source
    point ``i``; ``target_membership`` flags complete-target vertices present
    in the (cropped) target.
    """
    gt_index = np.asarray(gt_index, dtype=np.int64)
    member = np.asarray(target_membership, dtype=bool)
    if gt_index.size == 0:
        raise ValueError("empty source")
    return float(member[gt_index].mean())
