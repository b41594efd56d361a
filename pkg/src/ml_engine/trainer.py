"""Trainer — full training and early-stopped training.

Both entry points share one training loop so that, for the same seed,
early training on the full dataset for the full epoch count reproduces
full training exactly:

    1. Initialise the network from the ``init`` substream.
    2. For every epoch, reshuffle the train split with the ``shuffle``
       substream keyed by ``(arch_id, epoch)`` and take mini-batch SGD steps.
    3. ``train_early`` records, after every epoch, the validation accuracy,
       the GAP'd mean probe output of every feature layer and optionally
       the per-layer parameter snapshots.

Design:
    - Deterministic under the seed; independent of worker count.
    - Jobs run on a bounded thread pool and are re-sorted by arch_id.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, TypeVar

import numpy as np

from src.config import derive_seed, substream
from src.nn_engine.network import (
    NetworkInstance,
    backward_sgd_step,
    forward,
    snapshot_tap_params,
)
from src.search_engine.search_space import ArchCode, instantiate

from .dataset import Dataset, draw_probe
from .evaluator import accuracy

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class TrainSettings:
    """Optimiser settings (constant learning rate, no schedule)."""

    lr: float = 0.05
    momentum: float = 0.0
    batch_size: int = 32

    @classmethod
    def from_config(cls, cfg: Any) -> "TrainSettings":
        return cls(lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size)


@dataclass(frozen=True)
class ProbeSpec:
    """Probe set drawn once from the reduced train split."""

    size: int
    seed: int


@dataclass
class TrajectoryLog:
    """Per-epoch record of one early-stopped training run.

    Attributes:
        arch_id: Architecture index.
        arch: Canonical architecture string.
        eta: Number of epochs trained.
        val_acc: Validation accuracy after each epoch (``E`` is the last).
        probe_outputs: ``[epoch][layer]`` GAP'd mean probe vectors.
        param_snapshots: ``[epoch][layer]`` parameter vectors, or ``None``.
        param_count: Trainable scalars of the network.
        flops: Multiply-accumulates per example.
    """

    arch_id: int
    arch: str
    eta: int
    val_acc: list[float]
    probe_outputs: list[list[np.ndarray]]
    param_snapshots: list[list[np.ndarray]] | None = None
    param_count: int = 0
    flops: int = 0
    layer_kinds: list[str] = field(default_factory=list)

    @property
    def E(self) -> float:
        return self.val_acc[-1]

    @property
    def num_layers(self) -> int:
        return len(self.probe_outputs[0]) if self.probe_outputs else 0


def probe_vectors(net: NetworkInstance, probe: np.ndarray) -> list[np.ndarray]:
    """GAP each feature layer's output per example, then average over the probe set."""
    _, outputs = forward(net, probe, capture=True)
    vectors: list[np.ndarray] = []
    for t in net.taps:
        out = outputs[t].astype(np.float64)
        if out.ndim == 4:
            out = out.mean(axis=(2, 3))
        vectors.append(out.mean(axis=0))
    return vectors


def fit(
    net: NetworkInstance,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    seed: int,
    settings: TrainSettings,
    on_epoch: Callable[[int, NetworkInstance], None] | None = None,
) -> NetworkInstance:
    """Mini-batch SGD for *epochs* epochs; calls ``on_epoch(e, net)`` with ``e`` from 1."""
    n = len(x)
    for epoch in range(epochs):
        order = substream(seed, "shuffle", net.arch_id, epoch).permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            backward_sgd_step(net, x[idx], y[idx], settings.lr, settings.momentum)
        if on_epoch is not None:
            on_epoch(epoch + 1, net)
    return net


def train_full(
    code: ArchCode,
    d: Dataset,
    epochs: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
) -> tuple[float, NetworkInstance]:
    """Fully train *code* on the train split and score it on the test split.

    Returns:
        ``(y, net)``: test accuracy in ``[0, 1]`` and the trained network.

    Raises:
        ValueError: if ``epochs < 1``.
        TrainingDivergenceError: propagated with the arch_id.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    net = instantiate(code, seed=derive_seed(seed, "init"))
    x_train, y_train = d.part("train")
    fit(net, x_train, y_train, epochs, seed, settings)
    x_test, y_test = d.part("test")
    y_acc = accuracy(net, x_test, y_test)
    logger.debug("full  %-24s y=%.4f", code.canonical_string, y_acc)
    return y_acc, net


def train_early(
    code: ArchCode,
    d_reduced: Dataset,
    eta: int,
    seed: int,
    probe: ProbeSpec | np.ndarray,
    settings: TrainSettings = TrainSettings(),
    capture_params: bool = False,
) -> tuple[float, TrajectoryLog]:
    """Train on the reduced dataset for *eta* epochs, logging the trajectory.

    Args:
        probe: Pre-drawn probe examples, or a :class:`ProbeSpec` to draw them.
        capture_params: Also keep per-layer parameter snapshots every epoch.

    Returns:
        ``(E, log)``: validation accuracy after *eta* epochs and the log.

    Raises:
        ValueError: if ``eta < 1`` or the probe exceeds the reduced train split.
        TrainingDivergenceError: propagated with the arch_id.
    """
    if eta < 1:
        raise ValueError(f"eta must be >= 1, got {eta}")
    if isinstance(probe, ProbeSpec):
        probe = draw_probe(d_reduced, probe.size, probe.seed)
    elif len(probe) > d_reduced.count("train"):
        raise ValueError(
            f"probe of {len(probe)} examples exceeds the reduced train split ({d_reduced.count('train')})"
        )

    net = instantiate(code, seed=derive_seed(seed, "init"))
    x_train, y_train = d_reduced.part("train")
    x_val, y_val = d_reduced.part("val")

    log = TrajectoryLog(
        arch_id=code.index,
        arch=code.canonical_string,
        eta=eta,
        val_acc=[],
        probe_outputs=[],
        param_snapshots=[] if capture_params else None,
        param_count=net.param_count,
        flops=net.flops,
        layer_kinds=[net.layers[t].kind for t in net.taps],
    )

    def record(epoch: int, trained: NetworkInstance) -> None:
        log.val_acc.append(accuracy(trained, x_val, y_val))
        log.probe_outputs.append(probe_vectors(trained, probe))
        if log.param_snapshots is not None:
            log.param_snapshots.append(snapshot_tap_params(trained))

    fit(net, x_train, y_train, eta, seed, settings, on_epoch=record)
    logger.debug("early %-24s E=%.4f", code.canonical_string, log.E)
    return log.E, log


def run_jobs(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int = 1,
    key: Callable[[R], Any] | None = None,
) -> list[R]:
    """Apply *fn* to every item on a bounded thread pool.

    Results come back sorted by *key* (input order when ``None``), so the
    worker count never changes downstream outputs.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        results = [fn(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, items))
    if key is not None:
        results = sorted(results, key=key)
    return results
