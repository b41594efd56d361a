"""Supernet — weight-sharing mixture network over a layer-wise space.

Every block holds all candidate ops with their own shared weights. The
block output is the probability-weighted sum of the candidate outputs:

    out_b = Σ_o softmax(a_b)_o · op_o(x_b)
    skip    : op(x) = x
    e{E}_k{K}: op(x) = x + conv_K(relu(conv_1x1(x)))

Training alternates, per epoch, a weight pass over 80% of the train split
and (after ``warmup`` epochs with ``a`` frozen) a pass over the other 20%
that updates ``a`` only. Gradients of ``a`` go through the softmax
analytically.

Sub-networks are sampled block by block with probability softmax(a_b),
and a cluster's representative is the member with the largest summed
score of its chosen ops (``raw``: Σ a, ``log_softmax``: Σ log softmax(a)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.config import derive_seed, substream
from src.errors import TrainingDivergenceError
from src.ml_engine.dataset import Dataset
from src.nn_engine.layers import LayerSpec, layer_backward, layer_forward
from src.nn_engine.network import init_layer_params, softmax_cross_entropy

from .search_space import ArchCode, SearchSpace

logger = logging.getLogger(__name__)

SCORE_MODES: tuple[str, ...] = ("raw", "log_softmax")
WEIGHT_FRACTION: float = 0.8
SAMPLE_CAP_FACTOR: int = 100

_RELU = LayerSpec("relu")
_GAP = LayerSpec("global_avgpool")


@dataclass
class SupernetState:
    """Shared weights, operation scores and progress of one supernet.

    Attributes:
        space: The layer-wise search space it covers.
        a: ``[num_blocks, num_ops]`` raw operation scores.
        weights: Named parameter groups (``stem``, ``head``, ``b{block}/{op}/{1,2}``).
        epochs_trained: Completed epochs.
        prob_history: Per-block softmax(a) after every epoch.
    """

    space: SearchSpace
    a: np.ndarray
    weights: dict[str, list[np.ndarray]]
    epochs_trained: int = 0
    prob_history: list[np.ndarray] = field(default_factory=list)

    @property
    def num_blocks(self) -> int:
        return self.space.num_layers

    @property
    def op_names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.space.ops)


# ── Structure ─────────────────────────────────────────────────


def _stem_spec(space: SearchSpace) -> LayerSpec:
    return LayerSpec("conv2d", space.input_shape[0], space.base_channels, kernel=3)


def _head_spec(space: SearchSpace) -> LayerSpec:
    return LayerSpec("dense", space.base_channels, space.num_classes)


def _op_specs(space: SearchSpace, op_index: int) -> tuple[LayerSpec, LayerSpec] | None:
    op = space.ops[op_index]
    if op.is_skip:
        return None
    c = space.base_channels
    hidden = c * op.expansion
    return LayerSpec("conv2d", c, hidden, kernel=1), LayerSpec("conv2d", hidden, c, kernel=op.kernel)


def _key(block: int, op_index: int, part: int, space: SearchSpace) -> str:
    return f"b{block}/{space.ops[op_index].name}/{part}"


def init_supernet(space: SearchSpace, seed: int, dtype: np.dtype | type = np.float32) -> SupernetState:
    """Fresh supernet with uniform operation scores (``a = 0``).

    Raises:
        ValueError: if *space* is not a ``layerwise_ops`` space.
    """
    if space.kind != "layerwise_ops":
        raise ValueError(f"a supernet needs a layerwise_ops space, got '{space.kind}'")
    key = derive_seed(seed, "supernet")
    weights: dict[str, list[np.ndarray]] = {
        "stem": init_layer_params(_stem_spec(space), 0, 0, key, dtype),
        "head": init_layer_params(_head_spec(space), 0, 1, key, dtype),
    }
    for b in range(space.num_layers):
        for o in range(len(space.ops)):
            specs = _op_specs(space, o)
            if specs is None:
                continue
            for part, spec in enumerate(specs, start=1):
                weights[_key(b, o, part, space)] = init_layer_params(spec, b + 1, 2 * o + part, key, dtype)
    a = np.zeros((space.num_layers, len(space.ops)), dtype=np.float64)
    return SupernetState(space=space, a=a, weights=weights)


def probabilities(state: SupernetState) -> np.ndarray:
    """Per-block softmax of ``a``; each row sums to 1."""
    z = state.a - state.a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ── Mixture forward / backward ────────────────────────────────


def _forward(state: SupernetState, x: np.ndarray) -> tuple[np.ndarray, dict]:
    space = state.space
    probs = probabilities(state)
    h, stem_cache = layer_forward(_stem_spec(space), state.weights["stem"], x)
    h, relu_cache = layer_forward(_RELU, [], h)
    blocks = []
    for b in range(space.num_layers):
        block_in = h
        mixed = np.zeros(block_in.shape, dtype=np.float64)
        op_caches = []
        for o in range(len(space.ops)):
            specs = _op_specs(space, o)
            if specs is None:
                y, caches = block_in, None
            else:
                s1, s2 = specs
                t, c1 = layer_forward(s1, state.weights[_key(b, o, 1, space)], block_in)
                t, cr = layer_forward(_RELU, [], t)
                t, c2 = layer_forward(s2, state.weights[_key(b, o, 2, space)], t)
                y = (block_in.astype(np.float64) + t.astype(np.float64)).astype(block_in.dtype)
                caches = (c1, cr, c2)
            mixed += probs[b, o] * y.astype(np.float64)
            op_caches.append((y, caches))
        blocks.append((block_in, op_caches))
        h = mixed.astype(x.dtype)
    pooled, gap_cache = layer_forward(_GAP, [], h)
    logits, head_cache = layer_forward(_head_spec(space), state.weights["head"], pooled)
    cache = {
        "probs": probs,
        "stem": stem_cache,
        "relu": relu_cache,
        "blocks": blocks,
        "gap": gap_cache,
        "head": head_cache,
    }
    return logits, cache


def supernet_logits(state: SupernetState, x: np.ndarray) -> np.ndarray:
    """Mixture-network logits for a batch."""
    logits, _ = _forward(state, x)
    return logits


def supernet_gradients(
    state: SupernetState,
    x: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, list[np.ndarray]], np.ndarray]:
    """Loss, weight gradients per group and the gradient of ``a`` for one batch."""
    space = state.space
    logits, cache = _forward(state, x)
    loss, g = softmax_cross_entropy(logits, labels)
    probs = cache["probs"]

    grads: dict[str, list[np.ndarray]] = {}
    g, grads["head"], _ = layer_backward(_head_spec(space), state.weights["head"], cache["head"], g)
    g, _, _ = layer_backward(_GAP, [], cache["gap"], g)

    grad_a = np.zeros_like(state.a)
    for b in range(space.num_layers - 1, -1, -1):
        _, op_caches = cache["blocks"][b]
        d_prob = np.array([float(np.sum(g * y.astype(np.float64))) for y, _ in op_caches])
        grad_in = np.zeros_like(g)
        for o, (_, caches) in enumerate(op_caches):
            g_op = probs[b, o] * g
            grad_in += g_op
            if caches is None:
                continue
            s1, s2 = _op_specs(space, o)
            c1, cr, c2 = caches
            k1, k2 = _key(b, o, 1, space), _key(b, o, 2, space)
            t, grads[k2], _ = layer_backward(s2, state.weights[k2], c2, g_op)
            t, _, _ = layer_backward(_RELU, [], cr, t)
            t, grads[k1], _ = layer_backward(s1, state.weights[k1], c1, t)
            grad_in += t
        grad_a[b] = probs[b] * (d_prob - np.dot(probs[b], d_prob))
        g = grad_in

    g, _, _ = layer_backward(_RELU, [], cache["relu"], g)
    _, grads["stem"], _ = layer_backward(_stem_spec(space), state.weights["stem"], cache["stem"], g)
    return loss, grads, grad_a


def _group_identity(key: str) -> str:
    if key in ("stem", "head"):
        return key
    block, op, _ = key.split("/")
    return f"block {block[1:]} op {op}"


def _step_weights(state: SupernetState, grads: dict[str, list[np.ndarray]], lr: float) -> None:
    for key, group_grads in grads.items():
        params = state.weights[key]
        for j, g in enumerate(group_grads):
            updated = params[j].astype(np.float64) - lr * g
            if not np.all(np.isfinite(updated)):
                raise TrainingDivergenceError(None, _group_identity(key))
            params[j] = updated.astype(params[j].dtype)


# ── Training ──────────────────────────────────────────────────


def train_supernet(
    state: SupernetState,
    d_reduced: Dataset,
    epochs: int,
    warmup: int,
    seed: int,
    lr: float = 0.05,
    lr_a: float = 0.1,
    batch_size: int = 32,
) -> SupernetState:
    """Train shared weights and operation scores in place.

    Raises:
        ValueError: if ``warmup >= epochs`` or a learning rate is negative.
        TrainingDivergenceError: naming the block and op whose weights blew up.
    """
    if not 0 <= warmup < epochs:
        raise ValueError(f"warmup ({warmup}) must be in [0, epochs={epochs})")
    if lr < 0 or lr_a < 0:
        raise ValueError("learning rates must be >= 0")

    x_train, y_train = d_reduced.part("train")
    order = substream(seed, "supernet").permutation(len(x_train))
    cut = int(round(WEIGHT_FRACTION * len(order)))
    w_idx, a_idx = order[:cut], order[cut:]

    for epoch in range(epochs):
        rng = substream(seed, "supernet", epoch + 1)
        losses = []
        for batch in _batches(rng.permutation(w_idx), batch_size):
            loss, grads, _ = supernet_gradients(state, x_train[batch], y_train[batch])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(None, f"loss={loss} at epoch {epoch + 1}")
            _step_weights(state, grads, lr)
            losses.append(loss)
        if epoch >= warmup and len(a_idx):
            for batch in _batches(rng.permutation(a_idx), batch_size):
                _, _, grad_a = supernet_gradients(state, x_train[batch], y_train[batch])
                updated = state.a - lr_a * grad_a
                if not np.all(np.isfinite(updated)):
                    bad = int(np.flatnonzero(~np.isfinite(updated).all(axis=1))[0])
                    raise TrainingDivergenceError(None, f"operation scores of block {bad}")
                state.a = updated
        state.epochs_trained += 1
        state.prob_history.append(probabilities(state))
        logger.info(
            "supernet epoch %d/%d: loss=%.4f%s",
            epoch + 1,
            epochs,
            float(np.mean(losses)) if losses else float("nan"),
            " (a frozen)" if epoch < warmup else "",
        )
    return state


def _batches(idx: np.ndarray, batch_size: int):
    for start in range(0, len(idx), batch_size):
        yield idx[start : start + batch_size]


# ── Sampling and score-based selection ─────────────────────────


def draw_choices(state: SupernetState, n: int, rng: np.random.Generator) -> np.ndarray:
    """``[n, num_blocks]`` op indices, each block drawn ∝ softmax(a_b) (duplicates allowed)."""
    probs = probabilities(state)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((n, state.num_blocks))
    return np.stack([np.searchsorted(cdf[b], u[:, b], side="right") for b in range(state.num_blocks)], axis=1)


def sample_archs(state: SupernetState, count: int, seed: int) -> list[ArchCode]:
    """*count* distinct architectures drawn from the operation probabilities, sorted by arch_id.

    Raises:
        ValueError: if ``count > p`` or ``100 · count`` draws do not yield
            *count* distinct codes.
    """
    space = state.space
    if not 0 <= count <= space.size:
        raise ValueError(f"cannot sample {count} distinct architectures from a space of size {space.size}")
    rng = substream(seed, "sampling", 1)
    seen: dict[int, ArchCode] = {}
    cap = SAMPLE_CAP_FACTOR * count
    draws = 0
    while len(seen) < count:
        if draws >= cap:
            raise ValueError(
                f"only {len(seen)} distinct architectures after {cap} draws; "
                f"the operation probabilities are too peaked, try a smaller count"
            )
        batch = draw_choices(state, min(count, cap - draws), rng)
        for row in batch:
            draws += 1
            code = ArchCode(space, tuple(int(c) for c in row))
            seen.setdefault(code.index, code)
            if len(seen) == count:
                break
    return [seen[i] for i in sorted(seen)]


def arch_score(state: SupernetState, code: ArchCode, mode: str = "raw") -> float:
    """Summed score of the ops chosen by *code*."""
    if mode == "raw":
        table = state.a
    elif mode == "log_softmax":
        table = np.log(probabilities(state))
    else:
        raise ValueError(f"score mode must be one of {SCORE_MODES}, got '{mode}'")
    return float(sum(table[b, c] for b, c in enumerate(code.choices)))


def select_by_probability(
    members: Sequence[ArchCode],
    state: SupernetState,
    mode: str = "raw",
) -> ArchCode:
    """Member with the largest summed op score; ties go to the lowest arch_id.

    Raises:
        ValueError: on an empty cluster.
    """
    if not members:
        raise ValueError("cannot select from an empty cluster")
    scored = [(arch_score(state, code, mode), code) for code in members]
    best = max(score for score, _ in scored)
    return min((code for score, code in scored if score == best), key=lambda c: c.index)
