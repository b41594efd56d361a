"""Layer kernels, shape contract, gradients and SGD of the numpy engine."""

from __future__ import annotations

import math

import numpy as np
import pytest

from src.errors import ConfigurationError, TrainingDivergenceError
from src.nn_engine.layers import LayerSpec
from src.nn_engine.network import (
    backward_sgd_step,
    build_network,
    compute_gradients,
    copy_network,
    forward,
    snapshot_params,
    snapshot_tap_params,
    softmax_cross_entropy,
    tap_segments,
)


def _conv_pool_shortcut():
    layers = [
        LayerSpec("conv2d", 2, 3, kernel=3),
        LayerSpec("relu"),
        LayerSpec("avgpool2x2"),
        LayerSpec("conv2d", 3, 3, kernel=3),
        LayerSpec("shortcut_add", skip_from=2),
        LayerSpec("global_avgpool"),
        LayerSpec("dense", 3, 2),
    ]
    return layers, (2, 5, 5), 2


def _strided_residual():
    layers = [
        LayerSpec("conv2d", 2, 4, kernel=3, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv2d", 4, 4, kernel=1),
        LayerSpec("shortcut_add", skip_from=1),
        LayerSpec("identity"),
        LayerSpec("global_avgpool"),
        LayerSpec("dense", 4, 3),
    ]
    return layers, (2, 5, 5), 3


def _dense_input_skip():
    layers = [
        LayerSpec("dense", 4, 4),
        LayerSpec("relu"),
        LayerSpec("shortcut_add", skip_from=-1),
        LayerSpec("dense", 4, 2),
    ]
    return layers, (4,), 2


def _loss(net, x, y) -> float:
    logits, _ = forward(net, x)
    return softmax_cross_entropy(logits, y)[0]


# ── Forward ───────────────────────────────────────────────────


def test_identity_net_returns_input():
    net = build_network([LayerSpec("identity")], (3,), 3)
    x = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    logits, _ = forward(net, x)
    np.testing.assert_array_equal(logits, x)


def test_zero_dense_gives_zero_logits():
    net = build_network([LayerSpec("dense", 3, 2)], (3,), 2)
    net.parameters[0] = [np.zeros((3, 2), np.float32), np.zeros(2, np.float32)]
    logits, _ = forward(net, np.ones((4, 3), np.float32))
    np.testing.assert_array_equal(logits, np.zeros((4, 2)))


def test_two_dense_layers_match_matrix_product():
    net = build_network([LayerSpec("dense", 2, 2), LayerSpec("dense", 2, 2)], (2,), 2, dtype=np.float64)
    w1, b1 = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5])
    w2, b2 = np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1.0, 1.0])
    net.parameters = [[w1, b1], [w2, b2]]
    x = np.array([[1.0, -1.0]])
    logits, _ = forward(net, x)
    np.testing.assert_allclose(logits, (x @ w1 + b1) @ w2 + b2)


def test_forward_is_bit_identical_across_calls():
    layers, shape, classes = _conv_pool_shortcut()
    net = build_network(layers, shape, classes, seed=3)
    x = np.random.default_rng(0).standard_normal((4, *shape)).astype(np.float32)
    a, _ = forward(net, x)
    b, _ = forward(net, x)
    assert a.tobytes() == b.tobytes()


def test_capture_returns_every_layer_output():
    layers, shape, classes = _conv_pool_shortcut()
    net = build_network(layers, shape, classes)
    _, outputs = forward(net, np.zeros((2, *shape), np.float32), capture=True)
    assert len(outputs) == len(layers)
    assert outputs[2].shape == (2, 3, 2, 2)
    assert outputs[-1].shape == (2, 2)


def test_strided_conv_output_shape():
    layers, shape, classes = _strided_residual()
    net = build_network(layers, shape, classes)
    _, outputs = forward(net, np.zeros((1, *shape), np.float32), capture=True)
    assert outputs[0].shape == (1, 4, 3, 3)


# ── Shape contract ────────────────────────────────────────────


def test_unknown_kind_rejected():
    with pytest.raises(ConfigurationError, match="Unknown layer kind"):
        LayerSpec("maxpool")


def test_even_kernel_rejected():
    with pytest.raises(ConfigurationError, match="odd"):
        LayerSpec("conv2d", 1, 1, kernel=2)


def test_dense_width_mismatch_names_layer():
    with pytest.raises(ConfigurationError, match="layer 0 \\(dense\\)"):
        build_network([LayerSpec("dense", 5, 3)], (4,), 3)


def test_shortcut_shape_mismatch_names_layer():
    with pytest.raises(ConfigurationError, match="layer 1 \\(shortcut_add\\)"):
        build_network([LayerSpec("dense", 4, 3), LayerSpec("shortcut_add", skip_from=-1)], (4,), 3)


def test_network_must_end_in_logits():
    with pytest.raises(ConfigurationError, match="logits"):
        build_network([LayerSpec("dense", 4, 3)], (4,), 5)


def test_batch_shape_mismatch_rejected():
    net = build_network([LayerSpec("dense", 4, 2)], (4,), 2)
    with pytest.raises(ConfigurationError, match="batch shape"):
        forward(net, np.zeros((2, 3), np.float32))


# ── Init and counting ─────────────────────────────────────────


def test_glorot_bound_and_zero_bias():
    net = build_network([LayerSpec("conv2d", 3, 8, kernel=3), LayerSpec("global_avgpool"), LayerSpec("dense", 8, 4)],
                        (3, 6, 6), 4, seed=11)
    w, b = net.parameters[0]
    bound = math.sqrt(6.0 / (3 * 9 + 8 * 9))
    assert np.all(np.abs(w) <= bound)
    assert not np.any(b)


def test_init_keyed_by_seed_and_arch():
    layers = [LayerSpec("dense", 4, 3)]
    a = build_network(layers, (4,), 3, arch_id=1, seed=5)
    b = build_network(layers, (4,), 3, arch_id=1, seed=5)
    c = build_network(layers, (4,), 3, arch_id=2, seed=5)
    np.testing.assert_array_equal(a.parameters[0][0], b.parameters[0][0])
    assert not np.array_equal(a.parameters[0][0], c.parameters[0][0])


def test_param_count_and_flops():
    net = build_network([LayerSpec("conv2d", 3, 2, kernel=3), LayerSpec("relu"),
                         LayerSpec("global_avgpool"), LayerSpec("dense", 2, 3)], (3, 4, 4), 3)
    assert net.param_count == (2 * 3 * 9 + 2) + (2 * 3 + 3)
    assert net.flops == 4 * 4 * 2 * 3 * 9 + 2 * 3


# ── Gradients ─────────────────────────────────────────────────


def _relu_pattern(net, x) -> list[np.ndarray]:
    _, outputs = forward(net, x, capture=True)
    return [outputs[i] > 0 for i, spec in enumerate(net.layers) if spec.kind == "relu"]


def _central_differences(net, x, y, grads, eps, rng, count=5):
    """Yield (analytic, numeric) pairs on sampled coordinates whose +-eps moves flip no ReLU."""
    base = _relu_pattern(net, x)
    for i, layer in enumerate(net.parameters):
        for j, param in enumerate(layer):
            for idx in rng.choice(param.size, size=min(count, param.size), replace=False):
                old = param.flat[idx]
                param.flat[idx] = old + eps
                up, up_pattern = _loss(net, x, y), _relu_pattern(net, x)
                param.flat[idx] = old - eps
                down, down_pattern = _loss(net, x, y), _relu_pattern(net, x)
                param.flat[idx] = old
                crossed = any(
                    not (np.array_equal(b, u) and np.array_equal(b, d))
                    for b, u, d in zip(base, up_pattern, down_pattern)
                )
                if crossed:
                    continue
                yield grads[i][j].flat[idx], (up - down) / (2 * eps)


@pytest.mark.parametrize("builder", [_conv_pool_shortcut, _strided_residual, _dense_input_skip])
@pytest.mark.parametrize("seed", range(20))
def test_analytic_gradients_match_central_differences(builder, seed):
    layers, shape, classes = builder()
    net = build_network(layers, shape, classes, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, *shape))
    y = rng.integers(0, classes, size=3)
    _, grads = compute_gradients(net, x, y)

    pairs = list(_central_differences(net, x, y, grads, 1e-6, rng))
    assert pairs
    for analytic, numeric in pairs:
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("builder", [_conv_pool_shortcut, _strided_residual, _dense_input_skip])
@pytest.mark.parametrize("seed", range(20))
def test_float32_gradients_match_central_differences(builder, seed):
    layers, shape, classes = builder()
    net = build_network(layers, shape, classes, seed=seed)
    assert net.parameters[0][0].dtype == np.float32
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, *shape)).astype(np.float32)
    y = rng.integers(0, classes, size=3)
    _, grads = compute_gradients(net, x, y)

    # the loss differences are taken on an exact float64 copy of the float32 weights
    twin = copy_network(net, np.float64)
    pairs = list(_central_differences(twin, x.astype(np.float64), y, grads, 1e-4, rng))
    assert pairs
    for analytic, numeric in pairs:
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-6

def test_uniform_logits_loss_is_log_classes():
    loss, _ = softmax_cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5))


# ── SGD ───────────────────────────────────────────────────────


def test_zero_lr_leaves_parameters_unchanged():
    layers, shape, classes = _conv_pool_shortcut()
    net = build_network(layers, shape, classes)
    before = snapshot_params(net)
    x = np.random.default_rng(1).standard_normal((2, *shape)).astype(np.float32)
    loss = backward_sgd_step(net, x, np.array([0, 1]), lr=0.0)
    assert np.isfinite(loss)
    for a, b in zip(before, snapshot_params(net)):
        np.testing.assert_array_equal(a, b)


def test_single_dense_step_follows_gradient():
    net = build_network([LayerSpec("dense", 2, 2)], (2,), 2, dtype=np.float64)
    net.parameters[0] = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2)]
    x, y = np.array([[1.0, 2.0]]), np.array([0])

    eps = 1e-6
    numeric = np.zeros((2, 2))
    for idx in range(4):
        w = net.parameters[0][0]
        old = w.flat[idx]
        w.flat[idx] = old + eps
        up = _loss(net, x, y)
        w.flat[idx] = old - eps
        down = _loss(net, x, y)
        w.flat[idx] = old
        numeric.flat[idx] = (up - down) / (2 * eps)

    w_before = net.parameters[0][0].copy()
    backward_sgd_step(net, x, y, lr=0.5)
    np.testing.assert_allclose(net.parameters[0][0], w_before - 0.5 * numeric, rtol=1e-3)


def test_negative_lr_rejected():
    net = build_network([LayerSpec("dense", 2, 2)], (2,), 2)
    with pytest.raises(ValueError):
        backward_sgd_step(net, np.zeros((1, 2), np.float32), np.array([0]), lr=-0.1)


def test_non_finite_loss_raises_divergence_with_arch_id():
    net = build_network([LayerSpec("dense", 2, 2)], (2,), 2, arch_id=7)
    net.parameters[0][0][:] = np.inf
    net.parameters[0][0][0, 0] = -np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergenceError) as info:
        backward_sgd_step(net, np.ones((1, 2), np.float32), np.array([0]), lr=0.1)
    assert info.value.arch_id == 7


def test_momentum_step_differs_from_plain_sgd_on_second_step():
    layers, shape, classes = _dense_input_skip()
    x = np.random.default_rng(2).standard_normal((4, *shape)).astype(np.float32)
    y = np.array([0, 1, 0, 1])
    plain = build_network(layers, shape, classes, seed=1)
    heavy = copy_network(plain)
    for _ in range(2):
        backward_sgd_step(plain, x, y, lr=0.1)
        backward_sgd_step(heavy, x, y, lr=0.1, momentum=0.9)
    assert not np.array_equal(plain.parameters[0][0], heavy.parameters[0][0])


# ── Snapshots ─────────────────────────────────────────────────


def test_snapshot_lengths():
    net = build_network([LayerSpec("dense", 2, 2), LayerSpec("identity")], (2,), 2)
    snaps = snapshot_params(net)
    assert snaps[0].size == 6
    assert snaps[1].size == 0


def test_copied_network_has_equal_snapshot():
    layers, shape, classes = _conv_pool_shortcut()
    net = build_network(layers, shape, classes, seed=4)
    twin = copy_network(net)
    for a, b in zip(snapshot_params(net), snapshot_params(twin)):
        np.testing.assert_array_equal(a, b)


def test_tap_segments_cover_untapped_layers():
    layers = [
        LayerSpec("conv2d", 3, 4, kernel=3, tap=False),
        LayerSpec("relu"),
        LayerSpec("global_avgpool"),
        LayerSpec("dense", 4, 2),
    ]
    net = build_network(layers, (3, 4, 4), 2)
    assert net.taps == [1, 2, 3]
    assert tap_segments(net) == [[0, 1], [2], [3]]
    tap_params = snapshot_tap_params(net)
    assert [v.size for v in tap_params] == [4 * 3 * 9 + 4, 0, 4 * 2 + 2]
