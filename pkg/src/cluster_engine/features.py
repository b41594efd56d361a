"""Trajectory Features — per-layer convergence features of a training run.

For layer ``l`` and epoch ``e`` the feature is the cosine between the
layer's epoch-1 vector and its epoch-``e`` vector:

    output-based : vectors are the GAP'd mean probe outputs (default)
    param-based  : vectors are the layer's parameters

The result is an ``L × η`` matrix with entries in ``[-1, 1]``; column 1
is all ones whenever the epoch-1 vectors are nonzero. Parameter-free
layers have no param-based feature and get the sentinel 1.0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.ml_engine.trainer import TrajectoryLog

logger = logging.getLogger(__name__)

NORM_EPS: float = 1e-12
SOURCES: dict[str, str] = {"output": "output_based", "param": "param_based"}


@dataclass(frozen=True)
class TrajectoryFeature:
    """``L × η`` drift matrix of one architecture."""

    arch_id: int
    matrix: np.ndarray
    source: str

    @property
    def num_layers(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def eta(self) -> int:
        return int(self.matrix.shape[1])


def cosine_drift(v1: np.ndarray, ve: np.ndarray) -> float:
    """``<v1, ve> / (‖v1‖·‖ve‖)``; 0.0 when either norm is below 1e-12.

    Raises:
        ValueError: on a length mismatch.
    """
    a = np.asarray(v1, dtype=np.float64).ravel()
    b = np.asarray(ve, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _drift_matrix(
    arch_id: int,
    per_epoch: list[list[np.ndarray]],
    eta: int,
    what: str,
    empty_value: float | None = None,
) -> np.ndarray:
    if len(per_epoch) < eta:
        raise ValueError(f"arch {arch_id}: {what} missing for epoch {len(per_epoch) + 1} of {eta}")
    n_layers = len(per_epoch[0])
    matrix = np.empty((n_layers, eta), dtype=np.float64)
    for e in range(eta):
        if len(per_epoch[e]) != n_layers:
            missing = min(len(per_epoch[e]), n_layers)
            raise ValueError(f"arch {arch_id}: {what} missing for layer {missing}, epoch {e + 1}")
    for l in range(n_layers):
        first = per_epoch[0][l]
        for e in range(eta):
            if empty_value is not None and first.size == 0:
                matrix[l, e] = empty_value
            else:
                matrix[l, e] = cosine_drift(first, per_epoch[e][l])
    return matrix


def features_from_outputs(log: TrajectoryLog) -> TrajectoryFeature:
    """Output-based features (defined for every layer kind).

    Raises:
        ValueError: if an epoch or layer is missing, naming (arch, layer, epoch).
    """
    matrix = _drift_matrix(log.arch_id, log.probe_outputs, log.eta, "probe outputs")
    return TrajectoryFeature(log.arch_id, matrix, SOURCES["output"])


def features_from_params(log: TrajectoryLog) -> TrajectoryFeature:
    """Parameter-based features; parameter-free layers get the sentinel 1.0.

    Raises:
        ValueError: if snapshots are absent or an epoch/layer is missing.
    """
    if log.param_snapshots is None:
        raise ValueError(f"arch {log.arch_id}: log has no parameter snapshots")
    matrix = _drift_matrix(log.arch_id, log.param_snapshots, log.eta, "parameter snapshots", empty_value=1.0)
    if log.param_snapshots:
        empty = [l for l, v in enumerate(log.param_snapshots[0]) if v.size == 0]
        if empty:
            logger.warning(
                "arch %d: layers %s have no parameters; param-based features use sentinel 1.0",
                log.arch_id,
                empty,
            )
    return TrajectoryFeature(log.arch_id, matrix, SOURCES["param"])


def features_from_log(log: TrajectoryLog, source: str = "output") -> TrajectoryFeature:
    """Dispatch on ``source`` (``output`` or ``param``)."""
    if source == "output":
        return features_from_outputs(log)
    if source == "param":
        return features_from_params(log)
    raise ValueError(f"feature source must be 'output' or 'param', got '{source}'")


def flatten(f: TrajectoryFeature) -> np.ndarray:
    """Layer-major flattening to a vector of length ``L · η``."""
    return f.matrix.reshape(-1).copy()


def truncate(f: TrajectoryFeature, eta: int) -> TrajectoryFeature:
    """Keep the first *eta* epoch columns."""
    if not 1 <= eta <= f.eta:
        raise ValueError(f"eta must be in [1, {f.eta}], got {eta}")
    return TrajectoryFeature(f.arch_id, f.matrix[:, :eta].copy(), f.source)


def default_eta(full_epochs: int) -> int:
    """10% of the full-training epochs, at least one."""
    return max(1, int(round(0.1 * full_epochs)))
