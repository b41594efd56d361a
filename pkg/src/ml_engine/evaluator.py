"""Evaluator — accuracy and evaluation-fidelity scoring.

Provides:
    - ``accuracy``       : top-1 accuracy of a network on a split
    - ``ranking_score``  : sign agreement between proxy scores E and ground truth y
    - ``fidelity_mse``   : mean squared gap between E and y
    - ``spearman`` / ``kendall`` : rank correlation helpers (scipy)

Orientation of the sign score: the literal pairing
``sgn(y_j − y_i) · sgn(E_i − E_j)`` is negative when E and y agree, so the
sum as written rewards discordance. ``RankingScore.raw`` keeps that literal
value; ``concordance = −raw`` and ``normalized`` report agreement as +1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from src.nn_engine.network import NetworkInstance, forward

ORIENTATION_NOTE: str = (
    "raw = sum_{i<j} sgn(y_j - y_i) * sgn(E_i - E_j) as written (negative when E agrees with y); "
    "concordance = -raw; normalized = concordance / informative pairs (+1 = perfect agreement)"
)


@dataclass
class EvalRecord:
    """Evaluation results of one architecture.

    Attributes:
        arch_id: Architecture index.
        E: Early-stop score in ``[0, 1]``.
        y: Ground-truth accuracy (present iff fully trained).
        cluster: Cluster index (``-1`` before clustering).
        fully_trained: Whether ``y`` comes from full training.
    """

    arch_id: int
    E: float
    y: float | None = None
    cluster: int = -1
    fully_trained: bool = False

    def __post_init__(self) -> None:
        if (self.y is not None) != self.fully_trained:
            raise ValueError(f"arch {self.arch_id}: y must be present iff fully_trained")


@dataclass(frozen=True)
class RankingScore:
    """Pairwise sign-agreement score between E and y."""

    raw: int
    concordance: int
    pairs: int
    normalized: float
    normalized_raw: float
    orientation: str = ORIENTATION_NOTE


def accuracy(net: NetworkInstance, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of examples whose arg-max logit equals the label.

    Returns 0.0 on empty input.
    """
    if len(y) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(y), batch_size):
        logits, _ = forward(net, x[start : start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start : start + batch_size]))
    return correct / len(y)


def _paired(records: Sequence[EvalRecord]) -> tuple[np.ndarray, np.ndarray]:
    if len(records) < 2:
        raise ValueError(f"need at least 2 records with E and y, got {len(records)}")
    missing = [r.arch_id for r in records if r.y is None]
    if missing:
        raise ValueError(f"records without ground truth y: {missing}")
    e = np.array([r.E for r in records], dtype=np.float64)
    y = np.array([r.y for r in records], dtype=np.float64)
    return e, y


def ranking_score(records: Sequence[EvalRecord]) -> RankingScore:
    """Pairwise sign score over all ``i < j`` (records taken in the given order).

    Pairs tied in E or y contribute 0 and are left out of the denominator.
    A score with no informative pair normalizes to 0.0.

    Raises:
        ValueError: with fewer than 2 records or a missing y.
    """
    e, y = _paired(records)
    i, j = np.triu_indices(len(e), k=1)
    sy = np.sign(y[j] - y[i])
    se = np.sign(e[i] - e[j])
    raw = int(np.sum(sy * se))
    pairs = int(np.sum((sy != 0) & (se != 0)))
    concordance = -raw
    return RankingScore(
        raw=raw,
        concordance=concordance,
        pairs=pairs,
        normalized=concordance / pairs if pairs else 0.0,
        normalized_raw=raw / pairs if pairs else 0.0,
    )


def fidelity_mse(records: Sequence[EvalRecord]) -> float:
    """``(1/p) · Σ (E − y)²``.

    Raises:
        ValueError: with fewer than 2 records or a missing y.
    """
    e, y = _paired(records)
    return float(np.mean((e - y) ** 2))


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation; 0.0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    rho, _ = stats.spearmanr(a, b)
    return float(rho)


def kendall(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall tau-b; 0.0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    tau, _ = stats.kendalltau(a, b)
    return float(tau)
