"""Shared fixtures: a tiny search space, a tiny dataset and a tiny experiment config."""

from __future__ import annotations

import copy

import pytest
import yaml

from src.ml_engine.dataset import make_synthetic_dataset
from src.search_engine.search_space import build_layerwise_space, build_toy_space

TINY_CONFIG: dict = {
    "space": {
        "kind": "channel_ratio",
        "depth": 2,
        "ratios": [0.5, 1, 2],
        "base_channels": 4,
        "input_shape": [3, 4, 4],
        "num_classes": 3,
    },
    "dataset": {"kind": "synthetic", "classes": 3, "per_class": 20, "separation": 1.0, "noise": 1.0},
    "sigma": 0.5,
    "eta": 2,
    "full_epochs": 3,
    "K": 2,
    "s": 6,
    "probe_size": 8,
    "seeds": [0],
    "workers": 1,
    "batch_size": 16,
    "random_search": {"enabled": False, "repeats": 2},
    "compare": {"K_values": [1, 2], "eta_values": [1, 2]},
}


@pytest.fixture
def toy_space():
    """Channel-ratio space with p = 4 on 4×4 inputs."""
    return build_toy_space(depth=2, ratios=[0.5, 1], base_channels=4, input_shape=(3, 4, 4), num_classes=3)


@pytest.fixture
def layerwise_space():
    """Layer-wise space: 2 blocks × {skip, e1_k3, e3_k3}, p = 9."""
    return build_layerwise_space(
        num_blocks=2, ops=["skip", "e1_k3", "e3_k3"], base_channels=4, input_shape=(3, 4, 4), num_classes=3
    )


@pytest.fixture
def tiny_dataset():
    """3 classes × 20 examples: 42 train, 9 val, 9 test."""
    return make_synthetic_dataset(classes=3, per_class=20, shape=(3, 4, 4), seed=0, separation=1.0)


@pytest.fixture
def tiny_config_dict():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping to YAML and return its path."""

    def _write(data: dict, name: str = "experiment.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        return path

    return _write
