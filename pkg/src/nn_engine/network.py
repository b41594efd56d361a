"""Network — instantiate, run and train a chain of :class:`LayerSpec` layers.

A network is an ordered layer list. Layer ``i`` reads the output of layer
``i - 1`` (the batch for ``i = 0``); ``shortcut_add`` layers also read the
output of layer ``skip_from``. The last layer must produce class logits.

Design:
    - Weight init: uniform in ``[-a, a]``, ``a = sqrt(6 / (fan_in + fan_out))``,
      drawn from a counter-based Philox generator keyed by
      ``(seed, arch_id, layer_index)``; biases start at zero.
    - Loss: mean softmax cross-entropy.
    - Optimiser: SGD with optional momentum.
    - A network is single-owner mutable state: never share one between threads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from src.errors import ConfigurationError, TrainingDivergenceError

from .layers import LayerSpec, count_macs, layer_backward, layer_forward, output_shape


@dataclass
class NetworkInstance:
    """A concrete, trainable network.

    Attributes:
        layers: Ordered layer specs.
        parameters: Per-layer ``[weight, bias]`` arrays (empty for parameter-free kinds).
        arch_id: Index of the architecture in its search space.
        input_shape: Per-example input shape (batch dim excluded).
        num_classes: Width of the logit vector.
        param_count: Total trainable scalars.
        flops: Multiply-accumulates of one forward pass on one example.
    """

    layers: list[LayerSpec]
    parameters: list[list[np.ndarray]]
    arch_id: int
    input_shape: tuple[int, ...]
    num_classes: int
    param_count: int = 0
    flops: int = 0
    velocity: list[list[np.ndarray]] | None = field(default=None, repr=False)

    @property
    def dtype(self) -> np.dtype:
        for p in self.parameters:
            if p:
                return p[0].dtype
        return np.dtype(np.float32)

    @property
    def taps(self) -> list[int]:
        """Layer indices whose outputs are feature layers."""
        return [i for i, spec in enumerate(self.layers) if spec.tap]


# ── Construction ──────────────────────────────────────────────


def infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Propagate shapes through the chain and return every layer's output shape.

    Raises:
        ConfigurationError: naming the first inconsistent layer.
    """
    shapes: list[tuple[int, ...]] = []
    current = tuple(input_shape)
    for i, spec in enumerate(layers):
        skip_shape = None
        if spec.kind == "shortcut_add":
            if not -1 <= spec.skip_from < i:
                raise ConfigurationError(
                    f"layer {i} (shortcut_add): skip_from={spec.skip_from} must point to an earlier layer"
                )
            skip_shape = tuple(input_shape) if spec.skip_from == -1 else shapes[spec.skip_from]
        current = output_shape(spec, i, current, skip_shape)
        shapes.append(current)
    return shapes


def init_layer_params(
    spec: LayerSpec,
    arch_id: int,
    layer_index: int,
    seed: int,
    dtype: np.dtype | type = np.float32,
) -> list[np.ndarray]:
    """Glorot-uniform weights and zero bias from a per-layer Philox stream."""
    if not spec.has_params:
        return []
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), int(arch_id), int(layer_index)]))
    )
    fan_in, fan_out = spec.fans()
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    w_shape, b_shape = spec.param_shapes()
    weight = rng.uniform(-bound, bound, size=w_shape).astype(dtype)
    bias = np.zeros(b_shape, dtype=dtype)
    return [weight, bias]


def build_network(
    layers: list[LayerSpec],
    input_shape: tuple[int, ...],
    num_classes: int,
    arch_id: int = 0,
    seed: int = 0,
    dtype: np.dtype | type = np.float32,
) -> NetworkInstance:
    """Validate a layer chain and initialise its parameters.

    Raises:
        ConfigurationError: if shapes are inconsistent or the chain does not
            end in a ``[num_classes]`` output.
    """
    shapes = infer_shapes(layers, input_shape)
    if not layers or shapes[-1] != (num_classes,):
        got = shapes[-1] if shapes else tuple(input_shape)
        raise ConfigurationError(
            f"network must end with {num_classes} logits, last layer yields {got}"
        )

    parameters = [
        init_layer_params(spec, arch_id, i, seed, dtype) for i, spec in enumerate(layers)
    ]
    param_count = sum(int(np.prod(s)) for spec in layers for s in spec.param_shapes())
    flops = sum(count_macs(spec, shape) for spec, shape in zip(layers, shapes))
    return NetworkInstance(
        layers=list(layers),
        parameters=parameters,
        arch_id=arch_id,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        param_count=param_count,
        flops=flops,
    )


def copy_network(net: NetworkInstance, dtype: np.dtype | type | None = None) -> NetworkInstance:
    """Deep copy, optionally casting parameters (e.g. to a float64 twin)."""
    twin = copy.deepcopy(net)
    if dtype is not None:
        twin.parameters = [[p.astype(dtype) for p in layer] for layer in twin.parameters]
        twin.velocity = None
    return twin


# ── Forward / backward ────────────────────────────────────────


def _run(net: NetworkInstance, batch: np.ndarray) -> tuple[list[np.ndarray], list]:
    if batch.ndim != len(net.input_shape) + 1 or tuple(batch.shape[1:]) != net.input_shape:
        raise ConfigurationError(
            f"layer 0 ({net.layers[0].kind}): batch shape {batch.shape} does not match "
            f"network input {net.input_shape}"
        )
    outputs: list[np.ndarray] = []
    caches: list = []
    x = batch
    for i, spec in enumerate(net.layers):
        skip = None
        if spec.kind == "shortcut_add":
            skip = batch if spec.skip_from == -1 else outputs[spec.skip_from]
        output_shape(spec, i, tuple(x.shape[1:]), None if skip is None else tuple(skip.shape[1:]))
        x, cache = layer_forward(spec, net.parameters[i], x, skip)
        outputs.append(x)
        caches.append(cache)
    return outputs, caches


def forward(
    net: NetworkInstance,
    batch: np.ndarray,
    capture: bool = False,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Run a batch through the network.

    Args:
        net: Network to evaluate.
        batch: ``[N, *input_shape]`` array.
        capture: If True, also return every layer's output in order.

    Returns:
        ``(logits, layer_outputs)``; ``layer_outputs`` is ``None`` unless *capture*.

    Raises:
        ConfigurationError: on a shape mismatch, naming the offending layer.
    """
    outputs, _ = _run(net, batch)
    return outputs[-1], (outputs if capture else None)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over softmax logits and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = z.shape[0]
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def compute_gradients(
    net: NetworkInstance,
    batch: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, list[list[np.ndarray]]]:
    """Loss and per-layer parameter gradients (float64) for one batch."""
    outputs, caches = _run(net, batch)
    loss, grad_logits = softmax_cross_entropy(outputs[-1], labels)

    n_layers = len(net.layers)
    grads: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    pending: dict[int, np.ndarray] = {n_layers - 1: grad_logits}

    for i in range(n_layers - 1, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            g = np.zeros_like(outputs[i], dtype=np.float64)
        spec = net.layers[i]
        grad_in, grad_params, grad_skip = layer_backward(spec, net.parameters[i], caches[i], g)
        grads[i] = grad_params
        if i > 0:
            pending[i - 1] = pending[i - 1] + grad_in if i - 1 in pending else grad_in
        if grad_skip is not None and spec.skip_from >= 0:
            j = spec.skip_from
            pending[j] = pending[j] + grad_skip if j in pending else grad_skip
    return loss, grads


def backward_sgd_step(
    net: NetworkInstance,
    batch: np.ndarray,
    labels: np.ndarray,
    lr: float,
    momentum: float = 0.0,
) -> float:
    """One in-place SGD step; returns the pre-step mean loss.

    Raises:
        ValueError: if ``lr < 0``.
        TrainingDivergenceError: if the loss or any updated parameter is non-finite.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    loss, grads = compute_gradients(net, batch, labels)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(net.arch_id, f"loss={loss}")

    if momentum > 0.0 and net.velocity is None:
        net.velocity = [[np.zeros(p.shape, dtype=np.float64) for p in layer] for layer in net.parameters]

    for i, layer_grads in enumerate(grads):
        for j, g in enumerate(layer_grads):
            param = net.parameters[i][j]
            step = g
            if momentum > 0.0:
                v = momentum * net.velocity[i][j] + g
                net.velocity[i][j] = v
                step = v
            updated = param.astype(np.float64) - lr * step
            if not np.all(np.isfinite(updated)):
                raise TrainingDivergenceError(net.arch_id, f"non-finite parameters in layer {i}")
            net.parameters[i][j] = updated.astype(param.dtype)
    return loss


# ── Snapshots ─────────────────────────────────────────────────


def snapshot_params(net: NetworkInstance) -> list[np.ndarray]:
    """One flattened ``weight ‖ bias`` vector per layer (empty when parameter-free)."""
    snaps: list[np.ndarray] = []
    for layer_params in net.parameters:
        if layer_params:
            snaps.append(np.concatenate([p.ravel() for p in layer_params]).copy())
        else:
            snaps.append(np.zeros(0, dtype=net.dtype))
    return snaps


def tap_segments(net: NetworkInstance) -> list[list[int]]:
    """For each tap, the layer indices it covers (everything since the previous tap)."""
    segments: list[list[int]] = []
    start = 0
    for t in net.taps:
        segments.append(list(range(start, t + 1)))
        start = t + 1
    return segments


def snapshot_tap_params(net: NetworkInstance) -> list[np.ndarray]:
    """Concatenated parameter vector per tap segment."""
    per_layer = snapshot_params(net)
    return [
        np.concatenate([per_layer[i] for i in seg]) if seg else np.zeros(0, dtype=net.dtype)
        for seg in tap_segments(net)
    ]
