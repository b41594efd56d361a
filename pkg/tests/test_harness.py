"""Oracle, staged pipeline, resume and the comparison studies on a tiny config."""

from __future__ import annotations

import pandas as pd
import pytest

from src.config import config_from_dict
from src.errors import StageError
from src.harness import pipeline, store
from src.harness.compare import compare_strategies, early_stop_bias, rankscore_from_run, summarize_compare
from src.harness.oracle import build_oracle, load_oracle, save_oracle
from src.harness.pipeline import STAGES, global_early_stopping, prepare, run_pipeline
from src.ml_engine.trainer import TrainSettings


def _oracle_into(cfg, out_dir):
    ctx = prepare(cfg, out_dir)
    table = build_oracle(ctx.space, ctx.d, cfg.full_epochs, ctx.seed, ctx.settings)
    save_oracle(out_dir / store.ORACLE, table)
    return table


# ── Oracle ────────────────────────────────────────────────────


def test_oracle_covers_the_space(tmp_path, toy_space, tiny_dataset):
    table = build_oracle(toy_space, tiny_dataset, 2, 0, TrainSettings(batch_size=16), workers=2)
    assert table.size == 4
    assert list(table.frame["arch_id"]) == [0, 1, 2, 3]
    y = table.y
    assert y[table.best] == max(y.values())
    assert table.ranking()[0] == table.best

    save_oracle(tmp_path / store.ORACLE, table)
    assert load_oracle(tmp_path / store.ORACLE).y == y


def test_oracle_guard_and_missing_table(tmp_path, toy_space, tiny_dataset):
    with pytest.raises(ValueError, match="guard"):
        build_oracle(toy_space, tiny_dataset, 1, 0, guard=3)
    with pytest.raises(FileNotFoundError, match="oracle"):
        load_oracle(tmp_path / store.ORACLE)


# ── Pipeline ──────────────────────────────────────────────────


@pytest.mark.slow
def test_pipeline_is_deterministic(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    assert (a.out_dir / store.SUMMARY).read_bytes() == (b.out_dir / store.SUMMARY).read_bytes()
    assert (a.out_dir / store.CLUSTERS).read_bytes() == (b.out_dir / store.CLUSTERS).read_bytes()
    assert store.load_run_state(a.out_dir)["completed"] == list(STAGES)


@pytest.mark.slow
def test_pipeline_artefacts_and_cost(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    result = run_pipeline(cfg, tmp_path)
    summary = result.summary
    assert summary["full_trainings"] == cfg.K == len(result.selection.champions)
    assert summary["winner"] in result.selection.champions
    results = store.read_table(tmp_path / store.RESULTS)
    assert len(results) == cfg.s
    assert int(results["winner"].sum()) == 1
    assert int(results["selected"].sum()) == cfg.K
    assert len(store.load_archs(tmp_path / store.SAMPLED, cfg.build_space())) == cfg.s
    assert summary["ranking_scope"] == {"over": "champions", "records": cfg.K}
    report = (tmp_path / store.REPORT).read_text(encoding="utf-8")
    assert "search winner" in report
    assert f"ranking score over the {cfg.K} champions" in report
    assert f"fidelity MSE over the {cfg.K} champions" in report


@pytest.mark.slow
@pytest.mark.parametrize("stop", STAGES[:-1])
def test_resume_after_each_stage_matches_uninterrupted_run(tmp_path, tiny_config_dict, stop):
    cfg = config_from_dict(tiny_config_dict)
    reference = run_pipeline(cfg, tmp_path / "ref")
    assert run_pipeline(cfg, tmp_path / "run", stop_after=stop) is None
    completed = store.load_run_state(tmp_path / "run")["completed"]
    assert completed == list(STAGES[: STAGES.index(stop) + 1])
    resumed = run_pipeline(cfg, tmp_path / "run")
    assert resumed.summary == reference.summary


@pytest.mark.slow
def test_changed_config_starts_over(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    run_pipeline(cfg, tmp_path / "run", stop_after="cluster")
    single = cfg.with_overrides(K=1)
    restarted = run_pipeline(single, tmp_path / "run")
    fresh = run_pipeline(single, tmp_path / "fresh")
    assert restarted.summary == fresh.summary
    assert restarted.summary["full_trainings"] == 1


@pytest.mark.slow
def test_failed_stage_keeps_earlier_stages(tmp_path, tiny_config_dict, monkeypatch):
    cfg = config_from_dict(tiny_config_dict)

    def boom(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline, "stage_cluster", boom)
    with pytest.raises(StageError, match="stage cluster: boom") as info:
        run_pipeline(cfg, tmp_path)
    assert info.value.stage == "cluster"
    assert store.load_run_state(tmp_path)["completed"] == ["sample", "early", "features"]


@pytest.mark.slow
def test_single_cluster_equals_global_early_stopping(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict).with_overrides(K=1)
    result = run_pipeline(cfg, tmp_path)
    plain = global_early_stopping(cfg)
    assert result.summary["winner"] == plain["winner"]
    assert result.summary["winner_y"] == plain["winner_y"]


@pytest.mark.slow
def test_supernet_mode_run(tmp_path, tiny_config_dict):
    tiny_config_dict.update(
        space={
            "kind": "layerwise_ops",
            "num_blocks": 2,
            "ops": ["skip", "e1_k3", "e3_k3"],
            "base_channels": 4,
            "input_shape": [3, 4, 4],
            "num_classes": 3,
        },
        mode="supernet",
        supernet={"epochs": 2, "warmup": 1, "lr_a": 0.5},
    )
    cfg = config_from_dict(tiny_config_dict)
    result = run_pipeline(cfg, tmp_path)
    assert (tmp_path / store.SUPERNET_JSON).exists()
    assert result.summary["full_trainings"] == len(result.selection.champions)
    assert set(result.summary["winner_scores"]) == {"raw", "log_softmax"}
    selection = store.read_json(tmp_path / store.SELECTION)
    assert selection["score_mode"] == "raw"
    assert all("score_raw" in row for row in selection["champions"])


# ── Studies ───────────────────────────────────────────────────


@pytest.mark.slow
def test_compare_exhaustive_cell_finds_the_optimum(tmp_path, tiny_config_dict):
    tiny_config_dict.update(s=9, compare={"K_values": [1, 9], "eta_values": [1, 3]})
    cfg = config_from_dict(tiny_config_dict)
    _oracle_into(cfg, tmp_path)
    df = compare_strategies(cfg, tmp_path)
    cell = df[(df["K"] == 9) & (df["eta"] == 3)]
    assert len(cell) == 1
    assert cell["normalized_rank"].iloc[0] == 1.0
    assert cell["winner_rank"].iloc[0] == 1
    assert set(df.columns) >= {
        "seed", "K", "eta", "winner", "winner_y", "winner_rank", "normalized_rank",
        "global_score", "cluster_score", "rs_budget", "rs_mean_best_y", "rs_mean_rank",
    }
    assert (tmp_path / "compare.csv").exists()
    assert "random-search budget" in (tmp_path / "compare_report.txt").read_text(encoding="utf-8")
    assert not summarize_compare(df).empty


@pytest.mark.slow
def test_compare_needs_an_oracle(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    with pytest.raises(FileNotFoundError, match="oracle"):
        compare_strategies(cfg, tmp_path)


@pytest.mark.slow
def test_rankscore_of_a_run(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    run_pipeline(cfg, tmp_path)
    _oracle_into(cfg, tmp_path)
    result = rankscore_from_run(tmp_path)
    assert result["records"] == cfg.s
    assert -1.0 <= result["normalized"] <= 1.0
    assert (tmp_path / "rankscore.json").exists()


@pytest.mark.slow
def test_bias_study_table(tmp_path, tiny_config_dict):
    cfg = config_from_dict(tiny_config_dict)
    df = early_stop_bias(cfg, tmp_path, etas=[1, 3])
    assert isinstance(df, pd.DataFrame)
    assert sorted(df["eta"].tolist()) == [1, 3]
    assert df["spearman"].between(-1.0, 1.0).all()
