"""Trajectory features, k-means and champion selection."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from src.cluster_engine.features import (
    cosine_drift,
    default_eta,
    features_from_log,
    features_from_outputs,
    features_from_params,
    flatten,
    truncate,
)
from src.cluster_engine.kmeans import ClusterModel, _settle, assign, kmeans, members
from src.cluster_engine.selection import (
    SelectionResult,
    baseline_budget,
    merge,
    normalized_rank,
    random_search_baseline,
    select_in_cluster,
    winner_rank,
)
from src.errors import TrainingDivergenceError
from src.ml_engine.dataset import make_synthetic_dataset
from src.ml_engine.evaluator import EvalRecord
from src.ml_engine.trainer import ProbeSpec, TrainSettings, TrajectoryLog, train_early, train_full
from src.nn_engine.layers import LayerSpec
from src.nn_engine.network import backward_sgd_step, build_network, snapshot_params
from src.search_engine.search_space import arch_from_index, build_toy_space, iter_space


def _log(probe_outputs, snapshots=None, arch_id=0):
    return TrajectoryLog(
        arch_id=arch_id,
        arch=str(arch_id),
        eta=len(probe_outputs),
        val_acc=[0.5] * len(probe_outputs),
        probe_outputs=[[np.asarray(v, dtype=np.float64) for v in epoch] for epoch in probe_outputs],
        param_snapshots=None
        if snapshots is None
        else [[np.asarray(v, dtype=np.float64) for v in epoch] for epoch in snapshots],
    )


# ── Features ──────────────────────────────────────────────────


def test_cosine_drift_examples():
    assert cosine_drift(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 1.0
    assert cosine_drift(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert cosine_drift(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.70710678)
    assert cosine_drift(np.array([1.0, 2.0]), np.array([-2.0, -4.0])) == pytest.approx(-1.0)


def test_cosine_drift_zero_norm_and_mismatch():
    assert cosine_drift(np.zeros(3), np.ones(3)) == 0.0
    assert cosine_drift(np.ones(3), np.full(3, 1e-14)) == 0.0
    with pytest.raises(ValueError, match="length"):
        cosine_drift(np.ones(2), np.ones(3))


def test_cosine_drift_is_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        k1, k2 = rng.uniform(0.01, 100.0, size=2)
        assert cosine_drift(k1 * a, k2 * b) == pytest.approx(cosine_drift(a, b), abs=1e-12)


def test_output_features_matrix():
    log = _log([[[1.0, 0.0], [3.0, 4.0]], [[1.0, 1.0], [6.0, 8.0]], [[0.0, 1.0], [-3.0, -4.0]]])
    f = features_from_outputs(log)
    assert f.matrix.shape == (2, 3) and f.num_layers == 2 and f.eta == 3
    np.testing.assert_allclose(f.matrix, [[1.0, math.sqrt(0.5), 0.0], [1.0, 1.0, -1.0]], atol=1e-12)
    assert f.source == "output_based"
    np.testing.assert_allclose(flatten(f), [1.0, math.sqrt(0.5), 0.0, 1.0, 1.0, -1.0], atol=1e-12)


def test_missing_epoch_names_arch_and_epoch():
    log = _log([[[1.0], [1.0]], [[1.0], [2.0]]], arch_id=7)
    log.eta = 3
    with pytest.raises(ValueError, match="arch 7.*epoch 3"):
        features_from_outputs(log)


def test_missing_layer_names_layer_and_epoch():
    log = _log([[[1.0], [1.0]], [[1.0]]], arch_id=4)
    with pytest.raises(ValueError, match="arch 4.*layer 1, epoch 2"):
        features_from_outputs(log)


def test_param_features_use_sentinel_for_parameter_free_layers(caplog):
    log = _log([[[1.0], [1.0]]] * 2, snapshots=[[[1.0, 0.0], []], [[1.0, 1.0], []]], arch_id=2)
    with caplog.at_level(logging.WARNING, logger="src.cluster_engine.features"):
        f = features_from_params(log)
    np.testing.assert_allclose(f.matrix, [[1.0, math.sqrt(0.5)], [1.0, 1.0]])
    assert "no parameters" in caplog.text
    assert f.source == "param_based"


def test_param_features_need_snapshots():
    with pytest.raises(ValueError, match="snapshots"):
        features_from_params(_log([[[1.0]]]))
    with pytest.raises(ValueError, match="feature source"):
        features_from_log(_log([[[1.0]]]), "gradient")


def test_single_dense_step_cosine_matches_hand_computation():
    net = build_network([LayerSpec("dense", 2, 2)], (2,), 2, dtype=np.float64)
    w, b = np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2)
    net.parameters[0] = [w.copy(), b.copy()]
    before = snapshot_params(net)
    backward_sgd_step(net, np.array([[1.0, 2.0]]), np.array([0]), lr=0.5)
    after = snapshot_params(net)

    p = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    g = p - np.array([1.0, 0.0])
    w_new = w - 0.5 * np.outer([1.0, 2.0], g)
    b_new = b - 0.5 * g
    v1 = np.concatenate([w.ravel(), b])
    v2 = np.concatenate([w_new.ravel(), b_new])
    expected = v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2))

    f = features_from_params(_log([[[1.0]], [[1.0]]], snapshots=[before, after]))
    assert f.matrix[0, 1] == pytest.approx(expected, rel=1e-9)


def test_frozen_training_gives_all_ones(toy_space, tiny_dataset):
    code = arch_from_index(toy_space, 3)
    _, log = train_early(code, tiny_dataset, 3, seed=0, probe=ProbeSpec(8, 0),
                         settings=TrainSettings(lr=0.0), capture_params=True)
    out = features_from_log(log, "output").matrix
    np.testing.assert_array_equal(out, np.repeat(out[:, :1], 3, axis=1))
    assert np.all((out[:, 0] == 1.0) | (out[:, 0] == 0.0))
    np.testing.assert_array_equal(features_from_log(log, "param").matrix, 1.0)


def test_trained_features_bounded_with_unit_first_column():
    space = build_toy_space(3, [0.5, 1, 2], base_channels=4, input_shape=(3, 4, 4), num_classes=3)
    d = make_synthetic_dataset(3, 20, (3, 4, 4), seed=1)
    for code in list(iter_space(space))[::9]:
        _, log = train_early(code, d, 5, seed=1, probe=ProbeSpec(8, 1), settings=TrainSettings(lr=0.1, batch_size=8))
        m = features_from_log(log).matrix
        assert m.shape == (len(log.layer_kinds), 5)
        assert np.all(m >= -1.0) and np.all(m <= 1.0)
        first = np.array([np.linalg.norm(v) >= 1e-12 for v in log.probe_outputs[0]])
        np.testing.assert_array_equal(m[first, 0], 1.0)


def test_truncate_and_default_eta():
    f = features_from_outputs(_log([[[1.0, 0.0]], [[1.0, 1.0]], [[0.0, 1.0]]]))
    t = truncate(f, 2)
    assert t.eta == 2
    np.testing.assert_array_equal(t.matrix, f.matrix[:, :2])
    with pytest.raises(ValueError):
        truncate(f, 4)
    assert default_eta(40) == 4
    assert default_eta(3) == 1


# ── k-means ───────────────────────────────────────────────────


def test_two_blobs_on_a_line():
    model = kmeans([[0.0], [1.0], [10.0], [11.0]], 2, seed=0)
    assert members(model, 0) == [0, 1]
    assert members(model, 1) == [2, 3]
    np.testing.assert_allclose(model.centroids.ravel(), [0.5, 10.5])
    assert model.inertia == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_two_blobs_for_any_seed(seed):
    rng = np.random.default_rng(seed)
    points = np.vstack([rng.normal(0.0, 0.1, (10, 3)), rng.normal(5.0, 0.1, (10, 3))])
    model = kmeans(points, 2, seed=seed)
    assert members(model, 0) == list(range(10))
    assert members(model, 1) == list(range(10, 20))


def test_single_cluster_centroid_is_mean():
    points = np.random.default_rng(2).standard_normal((7, 4))
    model = kmeans(points, 1, seed=0)
    assert model.non_empty == 1
    np.testing.assert_allclose(model.centroids[0], points.mean(axis=0))
    assert model.inertia == pytest.approx(float(((points - points.mean(axis=0)) ** 2).sum()))


def test_one_cluster_per_point_has_zero_inertia():
    points = np.random.default_rng(3).standard_normal((6, 2))
    model = kmeans(points, 6, seed=1)
    assert model.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(model.assignments.values()) == list(range(6))


def test_too_many_clusters_rejected():
    with pytest.raises(ValueError, match="distinct"):
        kmeans([[0.0], [0.0], [1.0]], 3, seed=0)
    with pytest.raises(ValueError):
        kmeans([[0.0], [1.0]], 0, seed=0)


def test_settling_moves_points_to_their_nearest_centroid():
    points = np.array([[0.0], [1.0], [10.0], [11.0]])
    history: list[float] = []
    labels, centroids = _settle(points, np.array([0, 0, 0, 1]), np.array([[11.0 / 3.0], [11.0]]), 10, history)
    assert labels.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(centroids.ravel(), [0.5, 10.5])
    assert history == [pytest.approx(1.0)]


def test_settling_stops_with_a_warning_before_emptying_a_cluster(caplog):
    points = np.array([[0.0], [1.0], [10.0]])
    with caplog.at_level(logging.WARNING, logger="src.cluster_engine.kmeans"):
        labels, centroids = _settle(points, np.array([0, 0, 1]), np.array([[0.5], [100.0]]), 10, [])
    assert labels.tolist() == [0, 0, 1]
    assert centroids.ravel().tolist() == [0.5, 100.0]
    assert "would empty cluster(s) [1]" in caplog.text


@pytest.mark.parametrize("instance", range(50))
def test_inertia_history_never_increases(instance):
    rng = np.random.default_rng(100 + instance)
    points = rng.standard_normal((int(rng.integers(12, 40)), 4)) * rng.uniform(0.5, 3.0)
    model = kmeans(points, int(rng.integers(2, 6)), seed=instance)
    history = np.array(model.inertia_history)
    assert np.all(np.diff(history) <= 1e-9 * max(1.0, history[0]))
    assert model.inertia == pytest.approx(history[-1])


@pytest.mark.parametrize("instance", range(10))
def test_final_assignment_is_nearest_centroid(instance):
    rng = np.random.default_rng(instance)
    points = rng.standard_normal((30, 3))
    model = kmeans(points, 4, seed=instance)
    for pos, a in enumerate(model.arch_ids):
        d2 = [float(np.sum((points[a] - c) ** 2)) for c in model.centroids]
        assert model.labels[pos] == int(np.argmin(d2))


def test_refinement_never_worsens_inertia():
    for seed in range(10):
        points = np.random.default_rng(seed).standard_normal((25, 2))
        refined = kmeans(points, 4, seed=seed, refine=True)
        plain = kmeans(points, 4, seed=seed, refine=False)
        assert refined.inertia <= plain.inertia + 1e-9


def test_input_order_does_not_matter():
    rng = np.random.default_rng(4)
    points = rng.standard_normal((15, 3))
    ids = list(range(100, 115))
    perm = rng.permutation(15)
    a = kmeans(points, 3, seed=2, arch_ids=ids)
    b = kmeans(points[perm], 3, seed=2, arch_ids=[ids[i] for i in perm])
    assert a.assignments == b.assignments
    assert a.inertia == b.inertia


def test_clusters_are_labelled_by_lowest_member():
    model = kmeans([[10.0], [0.0], [11.0], [1.0]], 2, seed=3, arch_ids=[5, 6, 7, 8])
    assert model.assignments[5] == 0
    assert members(model, 0) == [5, 7]
    assert members(model, 1) == [6, 8]


def test_assign_nearest_and_tie():
    model = ClusterModel(K=2, centroids=np.array([[0.0], [2.0]]), arch_ids=(0, 1),
                         labels=np.array([0, 1]), inertia=0.0, iterations_run=0)
    assert assign(model, np.array([2.0])) == 1
    assert assign(model, np.array([1.0])) == 0
    assert assign(model, np.array([-5.0])) == 0
    with pytest.raises(ValueError):
        assign(model, np.array([1.0, 2.0]))


def test_assign_matches_linear_scan():
    rng = np.random.default_rng(5)
    centroids = rng.standard_normal((5, 3))
    model = ClusterModel(K=5, centroids=centroids, arch_ids=tuple(range(5)),
                         labels=np.arange(5), inertia=0.0, iterations_run=0)
    for _ in range(50):
        f = rng.standard_normal(3)
        assert assign(model, f) == int(np.argmin([np.sum((f - c) ** 2) for c in centroids]))


# ── Selection ─────────────────────────────────────────────────


def test_select_in_cluster():
    assert select_in_cluster([EvalRecord(4, 0.2)]) == 4
    assert select_in_cluster([EvalRecord(1, 0.3), EvalRecord(2, 0.7), EvalRecord(3, 0.5)]) == 2
    assert select_in_cluster([EvalRecord(9, 0.5), EvalRecord(3, 0.5)]) == 3
    with pytest.raises(ValueError):
        select_in_cluster([])


class _FakeTrainer:
    def __init__(self, accuracies, diverge=()):
        self.accuracies = accuracies
        self.diverge = set(diverge)
        self.calls = []

    def __call__(self, code, d, epochs, seed, settings):
        self.calls.append(code.index)
        if code.index in self.diverge:
            raise TrainingDivergenceError(code.index, "loss=nan")
        return self.accuracies[code.index], None


def test_merge_keeps_most_accurate_champion(toy_space):
    trainer = _FakeTrainer({0: 0.71, 3: 0.76})
    champions = [arch_from_index(toy_space, 0), arch_from_index(toy_space, 3)]
    result = merge(champions, None, 10, 0, trainer=trainer)
    assert result.winner == 3 and result.winner_accuracy == 0.76
    assert result.full_trainings == 2 and sorted(trainer.calls) == [0, 3]


def test_merge_single_champion(toy_space):
    result = merge([arch_from_index(toy_space, 2)], None, 10, 0, trainer=_FakeTrainer({2: 0.4}))
    assert result.winner == 2 and result.full_trainings == 1


def test_merge_excludes_diverged_champions(toy_space, caplog):
    trainer = _FakeTrainer({0: 0.9, 1: 0.5}, diverge={0})
    with caplog.at_level(logging.WARNING):
        result = merge([arch_from_index(toy_space, 0), arch_from_index(toy_space, 1)], None, 10, 0, trainer=trainer)
    assert result.winner == 1
    assert result.diverged == [0]
    assert "excluded" in caplog.text

    with pytest.raises(TrainingDivergenceError):
        merge([arch_from_index(toy_space, 0)], None, 10, 0, trainer=_FakeTrainer({}, diverge={0}))


def test_adding_a_champion_never_lowers_the_winner(toy_space):
    accuracies = {0: 0.6, 1: 0.4, 2: 0.8, 3: 0.7}
    best = 0.0
    for n in range(1, 5):
        champions = [arch_from_index(toy_space, i) for i in range(n)]
        result = merge(champions, None, 1, 0, trainer=_FakeTrainer(accuracies))
        assert result.winner_accuracy >= best
        best = result.winner_accuracy


def test_merge_winner_matches_seeded_rerun(toy_space, tiny_dataset):
    settings = TrainSettings(batch_size=16)
    champions = [arch_from_index(toy_space, 0), arch_from_index(toy_space, 3)]
    result = merge(champions, tiny_dataset, 2, 4, settings, workers=2)
    y, _ = train_full(arch_from_index(toy_space, result.winner), tiny_dataset, 2, 4, settings)
    assert result.winner_accuracy == y


def test_selection_result_dict_round_trip():
    result = SelectionResult(champions=[3, 1], winner=3, winner_accuracy=0.75,
                             champion_y={3: 0.75, 1: 0.5}, diverged=[], full_trainings=2)
    assert SelectionResult.from_dict(result.to_dict()) == result


def test_random_search_with_full_lookup(toy_space):
    lookup = {0: 0.3, 1: 0.9, 2: 0.5, 3: 0.9}
    exhaustive = random_search_baseline(toy_space, 4, None, 10, 0, lookup=lookup)
    assert exhaustive.best_arch == [1] and exhaustive.best_y == [0.9]
    assert exhaustive.full_trainings == 0

    a = random_search_baseline(toy_space, 2, None, 10, 7, repeats=20, lookup=lookup)
    b = random_search_baseline(toy_space, 2, None, 10, 7, repeats=20, lookup=lookup)
    assert a.mean_best_y == b.mean_best_y
    assert len(a.best_y) == 20

    single = random_search_baseline(toy_space, 1, None, 10, 0, lookup=lookup)
    assert single.best_y[0] == lookup[single.best_arch[0]]

    with pytest.raises(ValueError):
        random_search_baseline(toy_space, 5, None, 10, 0, lookup=lookup)


def test_random_search_trains_each_architecture_once(toy_space, tiny_dataset):
    result = random_search_baseline(toy_space, 2, tiny_dataset, 1, 0, TrainSettings(batch_size=16), repeats=6)
    again = random_search_baseline(toy_space, 2, tiny_dataset, 1, 0, TrainSettings(batch_size=16), repeats=6)
    assert result.full_trainings <= toy_space.size
    assert result.best_y == again.best_y


def test_budget_and_rank_helpers():
    assert baseline_budget(27, 4, 40, 0.25, 3) == 4
    assert baseline_budget(15625, 1, 10, 0.1, 0) == 156
    oracle = {0: 0.5, 1: 0.9, 2: 0.7, 3: 0.9}
    assert winner_rank(oracle, 1) == 1 and winner_rank(oracle, 3) == 1
    assert winner_rank(oracle, 2) == 3
    assert winner_rank(oracle, 0) == 4
    assert normalized_rank(1, 27) == 1.0
    assert normalized_rank(27, 27) == 0.0
    assert normalized_rank(1, 1) == 1.0
