"""Dataset — synthetic image data, reduced datasets and probe sets.

A :class:`Dataset` keeps every example in one ``[N, C, H, W]`` tensor plus
a split-tag vector (``train`` / ``val`` / ``test``). Reduction only touches
the train split; validation and test examples are always carried over.

Real image data can be plugged in through :func:`load_raw_images`, which
reads the headerless ``[label byte | image bytes]`` record layout used by
the CIFAR binary releases. No dataset ships with the repo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import substream


SPLITS: tuple[str, ...] = ("train", "val", "test")
_SPLIT_FRACTIONS: tuple[float, float] = (0.70, 0.15)


@dataclass(frozen=True)
class Dataset:
    """Examples, integer labels and split tags.

    Attributes:
        x: ``[N, C, H, W]`` float32 examples.
        y: ``[N]`` integer labels in ``[0, num_classes)``.
        split: ``[N]`` split tags (``"train"``, ``"val"``, ``"test"``).
        num_classes: Number of classes.
    """

    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if len(self.x) != len(self.y) or len(self.y) != len(self.split):
            raise ValueError(
                f"Length mismatch: x={len(self.x)}, y={len(self.y)}, split={len(self.split)}"
            )
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        unknown = set(np.unique(self.split)) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split tags: {sorted(unknown)}")

    def part(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` of one split."""
        mask = self.split == tag
        return self.x[mask], self.y[mask]

    def count(self, tag: str) -> int:
        return int(np.sum(self.split == tag))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


@dataclass(frozen=True)
class ReducedSpec:
    """How to shrink the train split: keep ``⌈sigma · N_train⌉`` examples."""

    sigma: float
    seed: int
    stratified: bool = True


def _stratified_split(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    tags = np.empty(len(labels), dtype="<U5")
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(len(idx) * _SPLIT_FRACTIONS[0]))
        n_val = int(round(len(idx) * _SPLIT_FRACTIONS[1]))
        tags[idx[:n_train]] = "train"
        tags[idx[n_train : n_train + n_val]] = "val"
        tags[idx[n_train + n_val :]] = "test"
    return tags


def make_synthetic_dataset(
    classes: int,
    per_class: int,
    shape: tuple[int, int, int],
    seed: int,
    separation: float = 1.0,
    noise: float = 1.0,
) -> Dataset:
    """Gaussian class blobs in image space with a 70/15/15 stratified split.

    Each class gets a mean image drawn from N(0, 1) and scaled by
    *separation*; examples are that mean plus N(0, noise²) pixels.

    Raises:
        ValueError: if ``classes < 2`` or ``per_class < 1``.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = substream(seed, "data")
    shape = tuple(int(v) for v in shape)
    means = rng.standard_normal((classes, *shape)) * separation
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.standard_normal((len(labels), *shape)) * noise
    split = _stratified_split(labels, rng)
    return Dataset(x=x.astype(np.float32), y=labels.astype(np.int64), split=split, num_classes=classes)


def _class_quotas(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of *total* proportional to *counts*."""
    exact = counts * total / counts.sum()
    quotas = np.floor(exact).astype(int)
    remainder = total - int(quotas.sum())
    # ties resolved by class index (stable sort)
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1
    return quotas


def reduce_dataset(d: Dataset, spec: ReducedSpec) -> Dataset:
    """Subsample the train split to ``⌈sigma · N_train⌉`` examples.

    Raises:
        ValueError: if sigma is outside ``(0, 1]`` or a class loses all its
            train examples.
    """
    if not 0.0 < spec.sigma <= 1.0:
        raise ValueError(f"sigma must be in (0, 1], got {spec.sigma}")
    train_idx = np.flatnonzero(d.split == "train")
    if spec.sigma == 1.0:
        return d
    total = math.ceil(spec.sigma * len(train_idx))
    rng = substream(spec.seed, "data", 1)
    train_labels = d.y[train_idx]
    classes = np.unique(train_labels)

    if spec.stratified:
        counts = np.array([np.sum(train_labels == c) for c in classes])
        quotas = _class_quotas(counts, total)
        keep_parts = []
        for cls, quota in zip(classes, quotas):
            if quota == 0:
                raise ValueError(f"class {cls} loses all train examples at sigma={spec.sigma}")
            members = train_idx[train_labels == cls]
            keep_parts.append(members[rng.permutation(len(members))[:quota]])
        keep = np.concatenate(keep_parts)
    else:
        keep = train_idx[rng.permutation(len(train_idx))[:total]]
        lost = set(classes.tolist()) - set(d.y[keep].tolist())
        if lost:
            raise ValueError(f"classes {sorted(lost)} lose all train examples at sigma={spec.sigma}")

    mask = d.split != "train"
    mask[keep] = True
    return Dataset(x=d.x[mask], y=d.y[mask], split=d.split[mask], num_classes=d.num_classes)


def draw_probe(d_reduced: Dataset, size: int, seed: int, repeat: int | None = None) -> np.ndarray:
    """Fixed probe examples drawn from the (reduced) train split.

    *repeat* selects an alternative draw (probe-sensitivity study).

    Raises:
        ValueError: if *size* exceeds the train split.
    """
    x_train, _ = d_reduced.part("train")
    if size < 1 or size > len(x_train):
        raise ValueError(f"probe size {size} must be in [1, {len(x_train)}] (reduced train split)")
    rng = substream(seed, "probe") if repeat is None else substream(seed, "probe", repeat)
    idx = np.sort(rng.permutation(len(x_train))[:size])
    return x_train[idx]


def with_val_as_test(d: Dataset) -> Dataset:
    """Copy in which the validation split is replaced by the test split."""
    x_test, y_test = d.part("test")
    keep = d.split != "val"
    x = np.concatenate([d.x[keep], x_test])
    y = np.concatenate([d.y[keep], y_test])
    split = np.concatenate([d.split[keep], np.full(len(y_test), "val", dtype=d.split.dtype)])
    return Dataset(x=x, y=y, split=split, num_classes=d.num_classes)


def load_raw_images(
    path: str | Path,
    shape: tuple[int, int, int],
    num_classes: int,
    seed: int = 0,
) -> Dataset:
    """Load ``[label byte | C·H·W uint8 pixels]`` records into a Dataset.

    Pixels are scaled to ``[0, 1]``; the split is stratified 70/15/15.

    Raises:
        FileNotFoundError: If *path* does not exist.
        ValueError: If the file size is not a whole number of records.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Raw image file not found: {path}")
    pixels = int(np.prod(shape))
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % (pixels + 1):
        raise ValueError(f"'{path.name}' is not a whole number of {pixels + 1}-byte records")
    records = raw.reshape(-1, pixels + 1)
    labels = records[:, 0].astype(np.int64)
    x = records[:, 1:].reshape(-1, *shape).astype(np.float32) / 255.0
    split = _stratified_split(labels, substream(seed, "data"))
    return Dataset(x=x, y=labels, split=split, num_classes=num_classes)


DATASET_KINDS: tuple[str, ...] = ("synthetic", "raw")


def dataset_from_spec(
    spec: dict,
    input_shape: tuple[int, int, int],
    num_classes: int,
    seed: int,
) -> Dataset:
    """Build the full dataset described by the ``dataset`` section of a config.

    ``dataset.seed`` pins the data across root seeds; otherwise the root
    seed is used.

    Raises:
        ValueError: on an unknown kind.
    """
    kind = spec.get("kind", "synthetic")
    data_seed = int(spec.get("seed", seed))
    if kind == "synthetic":
        return make_synthetic_dataset(
            classes=int(spec.get("classes", num_classes)),
            per_class=int(spec.get("per_class", 100)),
            shape=input_shape,
            seed=data_seed,
            separation=float(spec.get("separation", 1.0)),
            noise=float(spec.get("noise", 1.0)),
        )
    if kind == "raw":
        return load_raw_images(spec["path"], input_shape, num_classes, seed=data_seed)
    raise ValueError(f"dataset.kind must be one of {DATASET_KINDS}, got '{kind}'")
