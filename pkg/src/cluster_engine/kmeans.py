"""k-means over flattened trajectory features.

Objective (squared Euclidean, no feature normalisation):

    inertia = Σ_k Σ_{i ∈ G_k} ‖F_i − c_k‖²

Procedure:
    1. Points are put in arch_id order, so the input order never matters.
    2. k-means++ seeding from the ``kmeans`` substream of the root seed.
    3. Lloyd iterations until the largest centroid shift drops below
       ``tol`` or ``max_iter`` is reached. An empty cluster is reseeded at
       the point farthest from its assigned centroid.
    4. Optional single-point refinement: move any point whose relocation
       lowers the objective, never emptying a cluster.
    5. Clusters are relabelled by their lowest member arch_id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.config import substream

logger = logging.getLogger(__name__)

_REFINE_EPS: float = 1e-12


@dataclass
class ClusterModel:
    """Result of one k-means run.

    Attributes:
        K: Requested number of clusters.
        centroids: ``[K, D]`` centroid matrix.
        arch_ids: Architecture ids in ascending order.
        labels: Cluster index of each entry of ``arch_ids``.
        inertia: Final objective value.
        iterations_run: Lloyd iterations performed.
        inertia_history: Objective after every assignment step.
    """

    K: int
    centroids: np.ndarray
    arch_ids: tuple[int, ...]
    labels: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def assignments(self) -> dict[int, int]:
        """arch_id → cluster index."""
        return {a: int(k) for a, k in zip(self.arch_ids, self.labels)}

    @property
    def non_empty(self) -> int:
        return int(len(np.unique(self.labels)))


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_plusplus_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability ∝ D².

    Raises:
        ValueError: if K exceeds the number of distinct points.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if K < 1 or K > n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            raise ValueError(f"K ({K}) exceeds the number of distinct points")
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_distances(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _update(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray, repair: bool = True) -> np.ndarray:
    K = len(centroids)
    new = centroids.copy()
    empty = []
    for k in range(K):
        mask = labels == k
        if mask.any():
            new[k] = points[mask].mean(axis=0)
        else:
            empty.append(k)
    if empty and repair:
        # reseed at the points farthest from their own centroid
        far = np.einsum("nd,nd->n", points - centroids[labels], points - centroids[labels])
        for k in empty:
            idx = int(np.argmax(far))
            new[k] = points[idx]
            far[idx] = -1.0
            logger.warning("k-means: cluster %d emptied; reseeded at point %d", k, idx)
    return new


def _settle(
    points: np.ndarray,
    labels: np.ndarray,
    centroids: np.ndarray,
    max_iter: int,
    history: list[float],
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd steps without repair until every point sits with its nearest centroid.

    Stops early, with a warning, when the next step would empty a cluster;
    the returned labels then keep every cluster populated.
    """
    for _ in range(max_iter):
        nearest = np.argmin(_sq_distances(points, centroids), axis=1)
        if np.array_equal(nearest, labels):
            break
        emptied = sorted(set(np.unique(labels).tolist()) - set(np.unique(nearest).tolist()))
        if emptied:
            logger.warning(
                "k-means: settling stopped, reassignment would empty cluster(s) %s; "
                "%d point(s) stay off their nearest centroid",
                emptied,
                int(np.sum(nearest != labels)),
            )
            break
        labels = nearest
        centroids = _update(points, labels, centroids, repair=False)
        history.append(_inertia(points, centroids, labels))
    return labels, centroids


def _refine(points: np.ndarray, labels: np.ndarray, K: int, max_passes: int) -> tuple[np.ndarray, int]:
    """Single-point moves that lower the objective (Hartigan criterion)."""
    labels = labels.copy()
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    sums = np.zeros((K, points.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, points)
    moves = 0
    for _ in range(max_passes):
        moved = False
        for i, x in enumerate(points):
            a = labels[i]
            if counts[a] <= 1:
                continue
            centres = sums / np.maximum(counts, 1.0)[:, None]
            d2 = np.einsum("kd,kd->k", centres - x, centres - x)
            gain_out = counts[a] / (counts[a] - 1.0) * d2[a]
            cost_in = counts / (counts + 1.0) * d2
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < gain_out - _REFINE_EPS * max(1.0, gain_out):
                labels[i] = b
                counts[a] -= 1.0
                counts[b] += 1.0
                sums[a] -= x
                sums[b] += x
                moves += 1
                moved = True
        if not moved:
            break
    return labels, moves


def _canonicalize(
    labels: np.ndarray,
    centroids: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Relabel clusters by lowest member position (points are sorted by arch_id)."""
    K = len(centroids)
    first: dict[int, int] = {}
    for pos, k in enumerate(labels):
        first.setdefault(int(k), pos)
    occupied = sorted(first, key=first.get)
    order = occupied + [k for k in range(K) if k not in first]
    remap = np.empty(K, dtype=np.int64)
    remap[order] = np.arange(K)
    return remap[labels], centroids[order]


def kmeans(
    features: Sequence[np.ndarray] | np.ndarray,
    K: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
    arch_ids: Sequence[int] | None = None,
    refine: bool = True,
) -> ClusterModel:
    """Cluster feature vectors into K groups.

    Args:
        features: One vector per architecture (all the same length).
        arch_ids: Ids matching *features*; defaults to ``0..n-1``.
        refine: Run the single-point refinement after Lloyd.

    Raises:
        ValueError: if ``K < 1``, K exceeds the number of distinct points,
            or the inputs are inconsistent.
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("features must be a non-empty list of equal-length vectors")
    ids = list(range(len(points))) if arch_ids is None else [int(a) for a in arch_ids]
    if len(ids) != len(points) or len(set(ids)) != len(ids):
        raise ValueError("arch_ids must be unique and match the number of feature vectors")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    distinct = len(np.unique(points, axis=0))
    if K > distinct:
        raise ValueError(f"K ({K}) exceeds the number of distinct feature vectors ({distinct})")

    order = np.argsort(ids, kind="stable")
    points = points[order]
    ids = [ids[i] for i in order]

    rng = substream(seed, "kmeans")
    centroids = kmeans_plusplus_init(points, K, rng)
    labels = np.argmin(_sq_distances(points, centroids), axis=1)
    history = [_inertia(points, centroids, labels)]

    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_centroids = _update(points, labels, centroids)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        labels = np.argmin(_sq_distances(points, centroids), axis=1)
        history.append(_inertia(points, centroids, labels))
        if shift < tol:
            break

    if refine and K > 1:
        labels, moves = _refine(points, labels, K, max_passes=max_iter)
        if moves:
            logger.debug("k-means refinement moved %d points", moves)
    centroids = _update(points, labels, centroids, repair=False)
    labels, centroids = _settle(points, labels, centroids, max_iter, history)
    labels, centroids = _canonicalize(labels, centroids)
    inertia = _inertia(points, centroids, labels)
    if inertia < history[-1]:
        history.append(inertia)

    logger.info("k-means: K=%d, %d points, inertia=%.6g after %d iterations", K, len(points), inertia, iterations)
    return ClusterModel(
        K=K,
        centroids=centroids,
        arch_ids=tuple(ids),
        labels=labels.astype(np.int64),
        inertia=inertia,
        iterations_run=iterations,
        inertia_history=history,
    )


def assign(model: ClusterModel, feature: np.ndarray) -> int:
    """Index of the nearest centroid; ties go to the lowest index.

    Raises:
        ValueError: on a length mismatch.
    """
    f = np.asarray(feature, dtype=np.float64).ravel()
    if f.shape[0] != model.centroids.shape[1]:
        raise ValueError(f"feature length {f.shape[0]} does not match centroid length {model.centroids.shape[1]}")
    d2 = np.einsum("kd,kd->k", model.centroids - f, model.centroids - f)
    return int(np.argmin(d2))


def members(model: ClusterModel, k: int) -> list[int]:
    """Sorted arch_ids of cluster *k*."""
    return sorted(a for a, lab in zip(model.arch_ids, model.labels) if lab == k)
