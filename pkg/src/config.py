"""Experiment configuration, seeding and environment detection.

Configs live in ``configs/*.yaml``. They are read with ``yaml.safe_load``,
which also parses JSON, so a JSON config file works unchanged. Every
required key is validated on load; a missing key raises a
``ConfigurationError`` naming the key and the file.

All randomness flows from one root seed through named substreams:
    sampling, init, data, probe, kmeans, shuffle, supernet, baseline
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from src.errors import ConfigurationError

logger = logging.getLogger(__name__)

PROJECT_ROOT: Path = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG: Path = PROJECT_ROOT / "configs" / "desk_toy.yaml"

# ── Seed substreams ───────────────────────────────────────────
_STREAMS: dict[str, int] = {
    "sampling": 1,
    "init": 2,
    "data": 3,
    "probe": 4,
    "kmeans": 5,
    "shuffle": 6,
    "supernet": 7,
    "baseline": 8,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for stage *name*, optionally keyed further (e.g. by arch_id)."""
    if name not in _STREAMS:
        raise KeyError(f"Unknown random substream '{name}'")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name], *map(int, keys)]))


def derive_seed(seed: int, name: str) -> int:
    """A 32-bit integer seed for stage *name* (used as a Philox key component)."""
    state = np.random.SeedSequence([int(seed), _STREAMS[name]]).generate_state(1)
    return int(state[0])


# ── Experiment config ─────────────────────────────────────────
_REQUIRED_KEYS: list[str] = [
    "space",
    "dataset",
    "sigma",
    "eta",
    "full_epochs",
    "K",
    "s",
    "probe_size",
    "seeds",
]
MODES: tuple[str, ...] = ("separate_training", "supernet")
FEATURE_SOURCES: tuple[str, ...] = ("output", "param")
SCORE_MODES: tuple[str, ...] = ("raw", "log_softmax")

_KMEANS_DEFAULTS: dict[str, Any] = {"max_iter": 300, "tol": 1e-6, "refine": True}
_SUPERNET_DEFAULTS: dict[str, Any] = {
    "epochs": 6,
    "warmup": 2,
    "lr_a": 0.1,
    "score_mode": "raw",
}
_RANDOM_SEARCH_DEFAULTS: dict[str, Any] = {"enabled": True, "repeats": 20}
_COMPARE_DEFAULTS: dict[str, Any] = {"K_values": [1, 3], "eta_values": [1, 4]}


@dataclass(frozen=True)
class ExperimentConfig:
    """The full reproducibility contract of one experiment."""

    space: dict[str, Any]
    dataset: dict[str, Any]
    sigma: float
    eta: int
    full_epochs: int
    K: int
    s: int
    probe_size: int
    seeds: tuple[int, ...]
    workers: int = 1
    feature_source: str = "output"
    mode: str = "separate_training"
    lr: float = 0.05
    momentum: float = 0.0
    batch_size: int = 32
    stratified: bool = True
    kmeans: dict[str, Any] = field(default_factory=lambda: dict(_KMEANS_DEFAULTS))
    supernet: dict[str, Any] = field(default_factory=lambda: dict(_SUPERNET_DEFAULTS))
    random_search: dict[str, Any] = field(default_factory=lambda: dict(_RANDOM_SEARCH_DEFAULTS))
    compare: dict[str, Any] = field(default_factory=lambda: dict(_COMPARE_DEFAULTS))

    @property
    def seed(self) -> int:
        """The root seed of a single run (first entry of ``seeds``)."""
        return self.seeds[0]

    def with_overrides(self, **changes: Any) -> "ExperimentConfig":
        """Copy with fields replaced; re-validated."""
        data = self.to_dict()
        data.update(changes)
        return config_from_dict(data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.with_overrides(seeds=[int(seed)])

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["seeds"] = list(self.seeds)
        return data

    def build_space(self):
        """The :class:`SearchSpace` described by ``space``."""
        from src.search_engine.search_space import build_space_from_spec

        return build_space_from_spec(self.space)


def config_from_dict(data: dict[str, Any], source: str = "<dict>") -> ExperimentConfig:
    """Validate a raw mapping and build an :class:`ExperimentConfig`.

    Raises:
        ConfigurationError: on a missing key or a violated invariant.
    """
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config must be a mapping, got {type(data).__name__}: {source}")
    for key in _REQUIRED_KEYS:
        if key not in data:
            raise ConfigurationError(f"Missing required key '{key}' in experiment config: {source}")

    seeds = data["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise ConfigurationError(f"'seeds' must be non-empty: {source}")

    cfg = ExperimentConfig(
        space=dict(data["space"]),
        dataset=dict(data["dataset"]),
        sigma=float(data["sigma"]),
        eta=int(data["eta"]),
        full_epochs=int(data["full_epochs"]),
        K=int(data["K"]),
        s=int(data["s"]),
        probe_size=int(data["probe_size"]),
        seeds=tuple(int(x) for x in seeds),
        workers=int(data.get("workers", 1)),
        feature_source=str(data.get("feature_source", "output")),
        mode=str(data.get("mode", "separate_training")),
        lr=float(data.get("lr", 0.05)),
        momentum=float(data.get("momentum", 0.0)),
        batch_size=int(data.get("batch_size", 32)),
        stratified=bool(data.get("stratified", True)),
        kmeans={**_KMEANS_DEFAULTS, **(data.get("kmeans") or {})},
        supernet={**_SUPERNET_DEFAULTS, **(data.get("supernet") or {})},
        random_search={**_RANDOM_SEARCH_DEFAULTS, **(data.get("random_search") or {})},
        compare={**_COMPARE_DEFAULTS, **(data.get("compare") or {})},
    )
    _validate(cfg, source)
    return cfg


def _validate(cfg: ExperimentConfig, source: str) -> None:
    def fail(msg: str) -> None:
        raise ConfigurationError(f"{msg}: {source}")

    if not 0.0 < cfg.sigma <= 1.0:
        fail(f"sigma must be in (0, 1], got {cfg.sigma}")
    if cfg.eta < 1 or cfg.full_epochs < 1:
        fail("eta and full_epochs must be >= 1")
    if cfg.eta > cfg.full_epochs:
        fail(f"eta ({cfg.eta}) must not exceed full_epochs ({cfg.full_epochs})")
    if cfg.K < 1:
        fail(f"K must be >= 1, got {cfg.K}")
    if cfg.K > cfg.s:
        fail(f"K ({cfg.K}) must not exceed s ({cfg.s})")
    if cfg.probe_size < 1:
        fail("probe_size must be >= 1")
    if cfg.workers < 1 or cfg.batch_size < 1:
        fail("workers and batch_size must be >= 1")
    if cfg.mode not in MODES:
        fail(f"mode must be one of {MODES}, got '{cfg.mode}'")
    if cfg.feature_source not in FEATURE_SOURCES:
        fail(f"feature_source must be one of {FEATURE_SOURCES}, got '{cfg.feature_source}'")
    if cfg.mode == "supernet" and cfg.space.get("kind") != "layerwise_ops":
        fail("supernet mode needs a layerwise_ops space")
    if int(cfg.supernet["warmup"]) >= int(cfg.supernet["epochs"]):
        fail("supernet.warmup must be smaller than supernet.epochs")
    if cfg.supernet["score_mode"] not in SCORE_MODES:
        fail(f"supernet.score_mode must be one of {SCORE_MODES}, got '{cfg.supernet['score_mode']}'")

    classes = cfg.dataset.get("classes")
    if classes is not None and int(classes) != int(cfg.space.get("num_classes", classes)):
        fail("dataset.classes and space.num_classes disagree")

    space = cfg.build_space()
    if cfg.s > space.size:
        fail(f"s ({cfg.s}) exceeds the search-space size ({space.size})")


def load_config(config_path: str | Path | None = None) -> ExperimentConfig:
    """Load and validate an experiment config (YAML or JSON).

    Args:
        config_path: Defaults to ``configs/desk_toy.yaml``.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigurationError: If a key is missing or an invariant fails.
    """
    path = DEFAULT_CONFIG if config_path is None else Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"Experiment config not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data, source=str(path))


def config_digest(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; identifies a run for resume.

    The worker count is left out: it never changes results.
    """
    content = cfg.to_dict()
    content.pop("workers", None)
    blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ── Environment ───────────────────────────────────────────────


def setup_hardware() -> dict[str, Any]:
    """Detect and log the execution environment.

    Returns:
        dict with keys ``os``, ``arch``, ``python_version``, ``numpy_version``,
        ``cpu_count``.
    """
    info = {
        "os": sys.platform,
        "arch": platform.machine(),
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "cpu_count": os.cpu_count() or 1,
    }
    logger.info(
        "environment: os=%s arch=%s python=%s numpy=%s cpus=%d (CPU only)",
        info["os"],
        info["arch"],
        info["python_version"],
        info["numpy_version"],
        info["cpu_count"],
    )
    return info
