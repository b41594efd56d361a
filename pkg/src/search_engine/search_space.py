"""Search Space — define, enumerate, sample and instantiate architectures.

Two spaces are supported:

``channel_ratio`` (toy space)
    ``depth`` searched layers, each ``conv3x3 → relu`` with width
    ``round(base_channels · ratio)``; an ``avgpool2x2`` follows every second
    searched layer while the map is at least 4 wide (never after the last);
    then ``global_avgpool → dense``. Every layer is a feature tap.

``layerwise_ops`` (fixed super-network)
    stem ``conv3x3 → relu``; per block either ``identity`` (``skip``) or
    ``conv1x1(C → e·C) → relu → conv k×k(e·C → C) → shortcut_add``;
    head ``global_avgpool → dense``. Taps: stem, every block output, head.

Architectures are numbered by a mixed-radix index (first layer most
significant); that index is the ``arch_id`` used everywhere downstream.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterator

import numpy as np

from src.config import substream
from src.errors import ArchParseError, ConfigurationError
from src.nn_engine.layers import LayerSpec
from src.nn_engine.network import NetworkInstance, build_network

SPACE_KINDS: tuple[str, ...] = ("channel_ratio", "layerwise_ops")
ORACLE_GUARD: int = 10_000

_OP_PATTERN = re.compile(r"^e(\d+)_k(\d+)$")


@dataclass(frozen=True)
class BlockOp:
    """A candidate operation of a layer-wise block."""

    name: str
    expansion: int = 0
    kernel: int = 0

    @property
    def is_skip(self) -> bool:
        return self.name == "skip"


def parse_block_op(spec: Any) -> BlockOp:
    """Build a :class:`BlockOp` from ``"skip"``, ``"e3_k5"`` or a mapping."""
    if isinstance(spec, BlockOp):
        return spec
    if isinstance(spec, dict):
        if spec.get("name") == "skip":
            return BlockOp("skip")
        e, k = int(spec["expansion"]), int(spec["kernel"])
        return BlockOp(spec.get("name", f"e{e}_k{k}"), e, k)
    token = str(spec).strip()
    if token in ("skip", "identity"):
        return BlockOp("skip")
    match = _OP_PATTERN.match(token)
    if not match:
        raise ConfigurationError(f"Unknown block op '{token}' (expected 'skip' or 'e<E>_k<K>')")
    return BlockOp(token, int(match.group(1)), int(match.group(2)))


@dataclass(frozen=True)
class SearchSpace:
    """An immutable search space.

    Attributes:
        kind: ``channel_ratio`` or ``layerwise_ops``.
        num_layers: Number of searched layers / blocks (L of the choice vector).
        choices_per_layer: Token strings available at each layer.
        base_channels: Baseline width.
        input_shape: ``(C, H, W)`` of one example.
        num_classes: Logit width.
        ratios: Width multipliers (``channel_ratio`` only).
        ops: Candidate block ops (``layerwise_ops`` only).
    """

    kind: str
    num_layers: int
    choices_per_layer: tuple[tuple[str, ...], ...]
    base_channels: int
    input_shape: tuple[int, int, int]
    num_classes: int
    ratios: tuple[float, ...] = ()
    ops: tuple[BlockOp, ...] = ()

    @property
    def size(self) -> int:
        """Total number of architectures ``p``."""
        return math.prod(len(c) for c in self.choices_per_layer)

    @property
    def radices(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.choices_per_layer)

    def width(self, ratio: float) -> int:
        """Round-half-up width for a ratio; zero is an error, never clamped."""
        w = int(math.floor(self.base_channels * ratio + 0.5))
        if w < 1:
            raise ConfigurationError(
                f"ratio {ratio:g} × base_channels {self.base_channels} rounds to width 0"
            )
        return w

    def template_taps(self) -> int:
        """Number of feature layers L of the structural template."""
        return sum(1 for spec in self.layers_for(tuple([0] * self.num_layers)) if spec.tap)

    def layers_for(self, choices: tuple[int, ...]) -> list[LayerSpec]:
        if self.kind == "channel_ratio":
            return _toy_layers(self, choices)
        return _layerwise_layers(self, choices)


@dataclass(frozen=True)
class ArchCode:
    """One architecture: a per-layer choice vector in a given space."""

    space: SearchSpace = field(repr=False, compare=False, hash=False)
    choices: tuple[int, ...]

    @property
    def canonical_string(self) -> str:
        return ",".join(self.space.choices_per_layer[l][c] for l, c in enumerate(self.choices))

    @property
    def index(self) -> int:
        """Mixed-radix enumeration index (the arch_id)."""
        idx = 0
        for radix, c in zip(self.space.radices, self.choices):
            idx = idx * radix + c
        return idx

    def __str__(self) -> str:
        return self.canonical_string


# ── Builders ──────────────────────────────────────────────────


def _format_ratio(ratio: float) -> str:
    return f"{ratio:g}"


def build_toy_space(
    depth: int,
    ratios: list[float],
    base_channels: int,
    input_shape: tuple[int, int, int] = (3, 8, 8),
    num_classes: int = 4,
) -> SearchSpace:
    """The channel-ratio toy space: ``len(ratios) ** depth`` architectures.

    Raises:
        ConfigurationError: on bad depth/ratios or any width rounding to zero.
    """
    if depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {depth}")
    if not ratios or any(float(r) <= 0 for r in ratios):
        raise ConfigurationError(f"ratios must be non-empty and positive, got {ratios}")
    ratios_t = tuple(float(r) for r in ratios)
    tokens = tuple(_format_ratio(r) for r in ratios_t)
    if len(set(tokens)) != len(tokens):
        raise ConfigurationError(f"duplicate ratios in {ratios}")
    space = SearchSpace(
        kind="channel_ratio",
        num_layers=int(depth),
        choices_per_layer=tuple(tokens for _ in range(depth)),
        base_channels=int(base_channels),
        input_shape=tuple(int(v) for v in input_shape),
        num_classes=int(num_classes),
        ratios=ratios_t,
    )
    for r in ratios_t:
        space.width(r)
    return space


def build_layerwise_space(
    num_blocks: int,
    ops: list[Any],
    base_channels: int = 8,
    input_shape: tuple[int, int, int] = (3, 8, 8),
    num_classes: int = 4,
    require_core_ops: bool = True,
) -> SearchSpace:
    """The layer-wise space: ``len(ops) ** num_blocks`` architectures.

    Args:
        ops: Block op tokens / mappings (``skip``, ``e{1,3,6}_k{3,5}``).
        require_core_ops: Demand a skip op plus at least two conv ops.
    """
    if num_blocks < 1:
        raise ConfigurationError(f"num_blocks must be >= 1, got {num_blocks}")
    parsed = tuple(parse_block_op(op) for op in ops)
    if not parsed:
        raise ConfigurationError("ops must be non-empty")
    names = tuple(op.name for op in parsed)
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate block ops in {names}")
    for op in parsed:
        if not op.is_skip and (op.expansion < 1 or op.kernel < 1 or op.kernel % 2 == 0):
            raise ConfigurationError(f"block op '{op.name}' needs expansion >= 1 and an odd kernel")
    if require_core_ops:
        convs = [op for op in parsed if not op.is_skip]
        if not any(op.is_skip for op in parsed) or len(convs) < 2:
            raise ConfigurationError(
                "layer-wise ops must include 'skip' and at least a small and a large conv block"
            )
    return SearchSpace(
        kind="layerwise_ops",
        num_layers=int(num_blocks),
        choices_per_layer=tuple(names for _ in range(num_blocks)),
        base_channels=int(base_channels),
        input_shape=tuple(int(v) for v in input_shape),
        num_classes=int(num_classes),
        ops=parsed,
    )


def build_space_from_spec(spec: dict[str, Any]) -> SearchSpace:
    """Build a space from the ``space`` section of an experiment config."""
    kind = spec.get("kind")
    if kind not in SPACE_KINDS:
        raise ConfigurationError(f"space.kind must be one of {SPACE_KINDS}, got '{kind}'")
    input_shape = tuple(spec.get("input_shape", (3, 8, 8)))
    num_classes = int(spec.get("num_classes", 4))
    if kind == "channel_ratio":
        return build_toy_space(
            depth=int(spec["depth"]),
            ratios=[float(Fraction(str(r))) for r in spec["ratios"]],
            base_channels=int(spec["base_channels"]),
            input_shape=input_shape,
            num_classes=num_classes,
        )
    return build_layerwise_space(
        num_blocks=int(spec["num_blocks"]),
        ops=list(spec["ops"]),
        base_channels=int(spec.get("base_channels", 8)),
        input_shape=input_shape,
        num_classes=num_classes,
        require_core_ops=bool(spec.get("require_core_ops", True)),
    )


# ── Templates ─────────────────────────────────────────────────


def _toy_layers(space: SearchSpace, choices: tuple[int, ...]) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    channels, height = space.input_shape[0], space.input_shape[1]
    for l, c in enumerate(choices):
        width = space.width(space.ratios[c])
        layers.append(LayerSpec("conv2d", channels, width, kernel=3))
        layers.append(LayerSpec("relu"))
        channels = width
        if (l + 1) % 2 == 0 and l < space.num_layers - 1 and height >= 4:
            layers.append(LayerSpec("avgpool2x2"))
            height //= 2
    layers.append(LayerSpec("global_avgpool"))
    layers.append(LayerSpec("dense", channels, space.num_classes))
    return layers


def _layerwise_layers(space: SearchSpace, choices: tuple[int, ...]) -> list[LayerSpec]:
    c = space.base_channels
    layers: list[LayerSpec] = [
        LayerSpec("conv2d", space.input_shape[0], c, kernel=3, tap=False),
        LayerSpec("relu"),
    ]
    for choice in choices:
        op = space.ops[choice]
        block_input = len(layers) - 1
        if op.is_skip:
            layers.append(LayerSpec("identity"))
            continue
        hidden = c * op.expansion
        layers.append(LayerSpec("conv2d", c, hidden, kernel=1, tap=False))
        layers.append(LayerSpec("relu", tap=False))
        layers.append(LayerSpec("conv2d", hidden, c, kernel=op.kernel, tap=False))
        layers.append(LayerSpec("shortcut_add", skip_from=block_input))
    layers.append(LayerSpec("global_avgpool"))
    layers.append(LayerSpec("dense", c, space.num_classes))
    return layers


# ── Codes ─────────────────────────────────────────────────────


def make_arch(space: SearchSpace, choices: list[int] | tuple[int, ...]) -> ArchCode:
    """Validate a choice vector and wrap it as an :class:`ArchCode`."""
    choices = tuple(int(c) for c in choices)
    if len(choices) != space.num_layers:
        raise ConfigurationError(f"expected {space.num_layers} choices, got {len(choices)}")
    for l, (c, radix) in enumerate(zip(choices, space.radices)):
        if not 0 <= c < radix:
            raise ConfigurationError(f"choice {c} out of range at layer {l} (radix {radix})")
    return ArchCode(space, choices)


def arch_from_index(space: SearchSpace, index: int) -> ArchCode:
    """Inverse of :attr:`ArchCode.index`."""
    if not 0 <= index < space.size:
        raise ValueError(f"index {index} outside [0, {space.size})")
    digits: list[int] = []
    for radix in reversed(space.radices):
        index, digit = divmod(index, radix)
        digits.append(digit)
    return ArchCode(space, tuple(reversed(digits)))


def iter_space(space: SearchSpace, limit: int = ORACLE_GUARD) -> Iterator[ArchCode]:
    """Enumerate every architecture in index order.

    Raises:
        ValueError: if the space is larger than *limit*.
    """
    if space.size > limit:
        raise ValueError(f"search space of size {space.size} exceeds the enumeration guard {limit}")
    for i in range(space.size):
        yield arch_from_index(space, i)


def _match_ratio(space: SearchSpace, token: str, position: int) -> int:
    tokens = space.choices_per_layer[position]
    if token in tokens:
        return tokens.index(token)
    try:
        value = float(Fraction(token))
    except (ValueError, ZeroDivisionError):
        raise ArchParseError(f"'{token}' is not a channel ratio", position) from None
    for i, r in enumerate(space.ratios):
        if math.isclose(value, r, rel_tol=1e-9, abs_tol=1e-12):
            return i
    raise ArchParseError(f"ratio '{token}' is not in the space {list(space.choices_per_layer[0])}", position)


def parse_arch(space: SearchSpace, text: str) -> ArchCode:
    """Parse a comma-separated architecture string.

    Raises:
        ArchParseError: on an unknown token (with its position) or wrong arity.
    """
    tokens = [t.strip() for t in str(text).split(",")]
    if len(tokens) != space.num_layers:
        raise ArchParseError(
            f"expected {space.num_layers} tokens, got {len(tokens)} in '{text}'",
            min(len(tokens), space.num_layers),
        )
    choices: list[int] = []
    for pos, token in enumerate(tokens):
        if space.kind == "channel_ratio":
            choices.append(_match_ratio(space, token, pos))
            continue
        options = space.choices_per_layer[pos]
        name = "skip" if token == "identity" else token
        if name not in options:
            raise ArchParseError(f"unknown op '{token}'", pos)
        choices.append(options.index(name))
    return ArchCode(space, tuple(choices))


def format_arch(code: ArchCode) -> str:
    return code.canonical_string


def sample_uniform(space: SearchSpace, count: int, seed: int) -> list[ArchCode]:
    """Draw *count* distinct architectures uniformly (sorted by arch_id).

    Raises:
        ValueError: if ``count > p``.
    """
    if count < 0 or count > space.size:
        raise ValueError(f"cannot sample {count} distinct architectures from a space of size {space.size}")
    rng = substream(seed, "sampling")
    if space.size <= 100_000:
        picked = rng.permutation(space.size)[:count]
        return [arch_from_index(space, int(i)) for i in sorted(picked)]

    seen: dict[int, ArchCode] = {}
    while len(seen) < count:
        choices = tuple(int(rng.integers(r)) for r in space.radices)
        code = ArchCode(space, choices)
        seen.setdefault(code.index, code)
    return [seen[i] for i in sorted(seen)]


def instantiate(
    code: ArchCode,
    seed: int = 0,
    dtype: np.dtype | type = np.float32,
) -> NetworkInstance:
    """Build the network for *code*; ``param_count`` and ``flops`` are filled in."""
    layers = code.space.layers_for(code.choices)
    return build_network(
        layers,
        code.space.input_shape,
        code.space.num_classes,
        arch_id=code.index,
        seed=seed,
        dtype=dtype,
    )
