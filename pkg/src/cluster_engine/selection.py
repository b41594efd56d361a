"""Selection — per-cluster champions, the final merge and the random-search baseline.

    select_in_cluster : early-stop champion of one cluster (argmax E)
    merge             : fully train the K champions, keep the most accurate
    random_search_baseline : fully train a uniform random budget of architectures

Ties always go to the lowest arch_id. A champion whose full training
diverges is excluded with a warning and never retried.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from src.config import substream
from src.errors import TrainingDivergenceError
from src.ml_engine.dataset import Dataset
from src.ml_engine.evaluator import EvalRecord
from src.ml_engine.trainer import TrainSettings, run_jobs, train_full
from src.search_engine.search_space import ArchCode, SearchSpace, arch_from_index

logger = logging.getLogger(__name__)

FullTrainer = Callable[[ArchCode, Dataset, int, int, TrainSettings], tuple[float, object]]


@dataclass
class SelectionResult:
    """Champions of every cluster and the merged winner.

    Attributes:
        champions: One arch_id per cluster, in cluster order.
        winner: arch_id with the highest full-training accuracy.
        winner_accuracy: That accuracy.
        champion_y: Full-training accuracy of every non-diverged champion.
        diverged: Champions excluded because training diverged.
        full_trainings: ``train_full`` invocations actually performed.
    """

    champions: list[int]
    winner: int
    winner_accuracy: float
    champion_y: dict[int, float] = field(default_factory=dict)
    diverged: list[int] = field(default_factory=list)
    full_trainings: int = 0

    def to_dict(self) -> dict:
        return {
            "champions": list(self.champions),
            "winner": self.winner,
            "winner_accuracy": self.winner_accuracy,
            "champion_y": {str(k): v for k, v in sorted(self.champion_y.items())},
            "diverged": list(self.diverged),
            "full_trainings": self.full_trainings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionResult":
        return cls(
            champions=[int(a) for a in data["champions"]],
            winner=int(data["winner"]),
            winner_accuracy=float(data["winner_accuracy"]),
            champion_y={int(k): float(v) for k, v in data.get("champion_y", {}).items()},
            diverged=[int(a) for a in data.get("diverged", [])],
            full_trainings=int(data.get("full_trainings", 0)),
        )


def argmax_lowest_id(scores: Mapping[int, float]) -> int:
    best = max(scores.values())
    return min(a for a, v in scores.items() if v == best)


def select_in_cluster(records: Sequence[EvalRecord]) -> int:
    """arch_id with the highest E; ties go to the lowest arch_id.

    Raises:
        ValueError: on an empty cluster.
    """
    if not records:
        raise ValueError("cannot select from an empty cluster")
    return argmax_lowest_id({r.arch_id: r.E for r in records})


def merge(
    champions: Sequence[ArchCode],
    d: Dataset,
    epochs: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    workers: int = 1,
    trainer: FullTrainer = train_full,
) -> SelectionResult:
    """Fully train every champion and return the most accurate.

    Exactly ``len(champions)`` full trainings are run.

    Raises:
        ValueError: if *champions* is empty.
        TrainingDivergenceError: if every champion diverges.
    """
    if not champions:
        raise ValueError("merge needs at least one champion")

    def job(code: ArchCode) -> tuple[int, float | None]:
        try:
            y, _ = trainer(code, d, epochs, seed, settings)
        except TrainingDivergenceError as exc:
            logger.warning("champion %d excluded from merge: %s", code.index, exc)
            return code.index, None
        return code.index, y

    outcomes = run_jobs(job, champions, workers=workers)
    champion_y = {a: y for a, y in outcomes if y is not None}
    diverged = sorted(a for a, y in outcomes if y is None)
    if not champion_y:
        raise TrainingDivergenceError(champions[0].index, f"all {len(champions)} champions diverged")

    winner = argmax_lowest_id(champion_y)
    logger.info("merge: winner %d with y=%.4f among %d champions", winner, champion_y[winner], len(champions))
    return SelectionResult(
        champions=[c.index for c in champions],
        winner=winner,
        winner_accuracy=champion_y[winner],
        champion_y=champion_y,
        diverged=diverged,
        full_trainings=len(champions),
    )


@dataclass
class RandomSearchResult:
    """Best-of-budget accuracies over the repeats of the baseline."""

    budget: int
    best_arch: list[int]
    best_y: list[float]
    full_trainings: int = 0

    @property
    def mean_best_y(self) -> float:
        return float(np.mean(self.best_y))

    @property
    def std_best_y(self) -> float:
        return float(np.std(self.best_y))


def random_search_baseline(
    space: SearchSpace,
    budget: int,
    d: Dataset,
    epochs: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    repeats: int = 1,
    lookup: Mapping[int, float] | None = None,
    workers: int = 1,
) -> RandomSearchResult:
    """Fully train *budget* distinct random architectures per repeat and keep the best.

    Repeat ``r`` draws from the ``baseline`` substream keyed by ``r``.
    Accuracies are cached across repeats; *lookup* (an oracle table built
    with the same seed) replaces training where it has an entry.

    Raises:
        ValueError: if *budget* is outside ``[1, p]`` or ``repeats < 1``.
    """
    if not 1 <= budget <= space.size:
        raise ValueError(f"budget must be in [1, {space.size}], got {budget}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")

    draws = [np.sort(substream(seed, "baseline", r).permutation(space.size)[:budget]) for r in range(repeats)]
    known: dict[int, float] = dict(lookup or {})
    needed = sorted({int(i) for ids in draws for i in ids} - set(known))

    def job(arch_id: int) -> tuple[int, float]:
        y, _ = train_full(arch_from_index(space, arch_id), d, epochs, seed, settings)
        return arch_id, y

    known.update(run_jobs(job, needed, workers=workers))

    best_arch, best_y = [], []
    for ids in draws:
        winner = argmax_lowest_id({int(i): known[int(i)] for i in ids})
        best_arch.append(winner)
        best_y.append(known[winner])
    return RandomSearchResult(budget=budget, best_arch=best_arch, best_y=best_y, full_trainings=len(needed))


def baseline_budget(s: int, eta: int, full_epochs: int, sigma: float, K: int) -> int:
    """Full trainings matching the cost of the pipeline: ``round(s·η/full_epochs·σ) + K``."""
    return int(round(s * eta / full_epochs * sigma)) + K


def winner_rank(oracle_y: Mapping[int, float], arch_id: int) -> int:
    """1-based rank of *arch_id* in the oracle (1 = best; ties share the better rank)."""
    y = oracle_y[arch_id]
    return 1 + sum(1 for v in oracle_y.values() if v > y)


def normalized_rank(rank: int, p: int) -> float:
    """``(p − rank) / (p − 1)``: 1.0 for the optimum, 0.0 for the worst."""
    if p <= 1:
        return 1.0
    return (p - rank) / (p - 1)
