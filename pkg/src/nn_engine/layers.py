"""Layers — layer specifications and per-kind forward/backward kernels.

Supported kinds:
    dense           – fully connected, ``[N, in] → [N, out]``
    conv2d          – square kernel, "same" padding ``k // 2``, optional stride
    relu            – element-wise rectifier
    avgpool2x2      – non-overlapping 2×2 mean pooling (odd edges dropped)
    global_avgpool  – spatial mean, ``[N, C, H, W] → [N, C]``
    shortcut_add    – adds the output of layer ``skip_from`` to its input
    identity        – pass-through

Arithmetic: inputs and parameters are promoted to float64 for every
accumulation, then outputs are rounded back to the input dtype. Backward
kernels return float64 gradients; the optimiser does the final rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ConfigurationError


LAYER_KINDS: tuple[str, ...] = (
    "dense",
    "conv2d",
    "relu",
    "avgpool2x2",
    "global_avgpool",
    "shortcut_add",
    "identity",
)
PARAMETERIZED_KINDS: frozenset[str] = frozenset({"dense", "conv2d"})


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network template.

    Args:
        kind: One of :data:`LAYER_KINDS`.
        in_channels: Input features / channels (parameterized kinds).
        out_channels: Output features / channels (parameterized kinds).
        kernel: Square kernel size (``conv2d`` only, odd).
        stride: Convolution stride.
        skip_from: For ``shortcut_add``: index of the earlier layer whose output
            is added (``-1`` = the network input).
        tap: Whether the layer output is a feature layer for trajectory capture.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    skip_from: int = -1
    tap: bool = True

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"Unknown layer kind '{self.kind}'")
        if self.kind in PARAMETERIZED_KINDS:
            if self.in_channels <= 0 or self.out_channels <= 0:
                raise ConfigurationError(
                    f"{self.kind} layer needs positive channels, got "
                    f"in={self.in_channels}, out={self.out_channels}"
                )
        if self.kind == "conv2d":
            if self.kernel <= 0 or self.kernel % 2 == 0:
                raise ConfigurationError(f"conv2d kernel must be odd and positive, got {self.kernel}")
            if self.stride <= 0:
                raise ConfigurationError(f"conv2d stride must be positive, got {self.stride}")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETERIZED_KINDS

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of ``[weight, bias]``; empty for parameter-free kinds."""
        if self.kind == "dense":
            return [(self.in_channels, self.out_channels), (self.out_channels,)]
        if self.kind == "conv2d":
            k = self.kernel
            return [(self.out_channels, self.in_channels, k, k), (self.out_channels,)]
        return []

    def fans(self) -> tuple[int, int]:
        """``(fan_in, fan_out)`` used by the uniform Glorot init."""
        if self.kind == "conv2d":
            area = self.kernel * self.kernel
            return self.in_channels * area, self.out_channels * area
        return self.in_channels, self.out_channels


# ── Shape contract ────────────────────────────────────────────


def output_shape(
    spec: LayerSpec,
    index: int,
    in_shape: tuple[int, ...],
    skip_shape: tuple[int, ...] | None = None,
) -> tuple[int, ...]:
    """Check *in_shape* (batch dim excluded) against *spec* and return the output shape.

    Raises:
        ConfigurationError: naming the layer index and kind on any mismatch.
    """
    where = f"layer {index} ({spec.kind})"

    if spec.kind == "dense":
        if len(in_shape) != 1 or in_shape[0] != spec.in_channels:
            raise ConfigurationError(
                f"{where}: expected input ({spec.in_channels},), got {in_shape}"
            )
        return (spec.out_channels,)

    if spec.kind in ("conv2d", "avgpool2x2", "global_avgpool"):
        if len(in_shape) != 3:
            raise ConfigurationError(f"{where}: expected [C, H, W] input, got {in_shape}")
        c, h, w = in_shape
        if spec.kind == "conv2d":
            if c != spec.in_channels:
                raise ConfigurationError(
                    f"{where}: expected {spec.in_channels} input channels, got {c}"
                )
            pad = spec.kernel // 2
            ho = (h + 2 * pad - spec.kernel) // spec.stride + 1
            wo = (w + 2 * pad - spec.kernel) // spec.stride + 1
            return (spec.out_channels, ho, wo)
        if spec.kind == "avgpool2x2":
            if h < 2 or w < 2:
                raise ConfigurationError(f"{where}: spatial size {h}x{w} too small to pool")
            return (c, h // 2, w // 2)
        return (c,)

    if spec.kind == "shortcut_add":
        if skip_shape is None:
            raise ConfigurationError(f"{where}: missing skip input from layer {spec.skip_from}")
        if tuple(skip_shape) != tuple(in_shape):
            raise ConfigurationError(
                f"{where}: skip shape {skip_shape} from layer {spec.skip_from} "
                f"does not match input {in_shape}"
            )
        return tuple(in_shape)

    # relu, identity
    return tuple(in_shape)


def count_macs(spec: LayerSpec, out_shape: tuple[int, ...]) -> int:
    """Multiply-accumulate count of one layer given its output shape."""
    if spec.kind == "dense":
        return spec.in_channels * spec.out_channels
    if spec.kind == "conv2d":
        _, ho, wo = out_shape
        return ho * wo * spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
    return 0


# ── Kernels ───────────────────────────────────────────────────


def layer_forward(
    spec: LayerSpec,
    params: list[np.ndarray],
    x: np.ndarray,
    skip: np.ndarray | None = None,
) -> tuple[np.ndarray, Any]:
    """Apply one layer. Returns ``(output, cache)`` for :func:`layer_backward`."""
    dtype = x.dtype

    if spec.kind == "dense":
        w, b = params
        out = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
        return out.astype(dtype), x

    if spec.kind == "conv2d":
        w, b = params
        k, s = spec.kernel, spec.stride
        pad = k // 2
        xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # [N, C, Ho, Wo, k, k] · [O, C, k, k] → [N, Ho, Wo, O]
        out = np.tensordot(win, w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + b.astype(np.float64)[None, :, None, None]
        return out.astype(dtype), (x.shape, xp.shape, win)

    if spec.kind == "relu":
        return np.maximum(x, 0).astype(dtype), x

    if spec.kind == "avgpool2x2":
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, : 2 * ho, : 2 * wo].astype(np.float64).reshape(n, c, ho, 2, wo, 2)
        return blocks.mean(axis=(3, 5)).astype(dtype), x.shape

    if spec.kind == "global_avgpool":
        return x.astype(np.float64).mean(axis=(2, 3)).astype(dtype), x.shape

    if spec.kind == "shortcut_add":
        out = x.astype(np.float64) + skip.astype(np.float64)
        return out.astype(dtype), None

    return x, None  # identity


def layer_backward(
    spec: LayerSpec,
    params: list[np.ndarray],
    cache: Any,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray | None]:
    """Back-propagate through one layer.

    Returns:
        ``(grad_input, grad_params, grad_skip)``; ``grad_skip`` is only set
        for ``shortcut_add``.
    """
    g = grad_out.astype(np.float64)

    if spec.kind == "dense":
        x = cache.astype(np.float64)
        w = params[0].astype(np.float64)
        return g @ w.T, [x.T @ g, g.sum(axis=0)], None

    if spec.kind == "conv2d":
        x_shape, xp_shape, win = cache
        w = params[0].astype(np.float64)
        k, s = spec.kernel, spec.stride
        pad = k // 2
        _, _, ho, wo = g.shape
        grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        grad_xp = np.zeros(xp_shape, dtype=np.float64)
        for i in range(k):
            for j in range(k):
                # [N, O, Ho, Wo] · [O, C] → [N, Ho, Wo, C]
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
                grad_xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        h, w_in = x_shape[2], x_shape[3]
        return grad_xp[:, :, pad : pad + h, pad : pad + w_in], [grad_w, grad_b], None

    if spec.kind == "relu":
        return g * (cache > 0), [], None

    if spec.kind == "avgpool2x2":
        n, c, h, w = cache
        grad_x = np.zeros(cache, dtype=np.float64)
        up = np.repeat(np.repeat(g / 4.0, 2, axis=2), 2, axis=3)
        grad_x[:, :, : up.shape[2], : up.shape[3]] = up
        return grad_x, [], None

    if spec.kind == "global_avgpool":
        n, c, h, w = cache
        return np.broadcast_to(g[:, :, None, None] / (h * w), cache).copy(), [], None

    if spec.kind == "shortcut_add":
        return g, [], g

    return g, [], None  # identity
