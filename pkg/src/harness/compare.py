"""Compare — strategy grids and studies evaluated against the oracle.

    compare_strategies : K × η grid of the search against the oracle, with
                         a random-search baseline at matched cost
    probe_sensitivity  : spread of the search winner over probe-set draws
    early_stop_bias    : rank correlation between E and parameter count
    rankscore_table    : ranking fidelity of E against the oracle

Ground truth comes from the oracle table of each seed (``oracle`` command),
so no study here runs a full training of its own.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.config import ExperimentConfig
from src.cluster_engine.features import features_from_log, truncate
from src.cluster_engine.kmeans import kmeans, members
from src.cluster_engine.selection import (
    argmax_lowest_id,
    baseline_budget,
    normalized_rank,
    random_search_baseline,
    select_in_cluster,
    winner_rank,
)
from src.ml_engine.dataset import draw_probe
from src.ml_engine.evaluator import ORIENTATION_NOTE, EvalRecord, fidelity_mse, kendall, ranking_score, spearman
from src.ml_engine.trainer import TrajectoryLog
from src.search_engine.search_space import iter_space, sample_uniform

from . import store
from .oracle import OracleTable, load_oracle
from .pipeline import RunContext, early_logs, prepare, run_dir

logger = logging.getLogger(__name__)

COMPARE_CSV = "compare.csv"
COMPARE_REPORT = "compare_report.txt"
PROBE_CSV = "probe.csv"
BIAS_CSV = "bias.csv"
RANKSCORE_JSON = "rankscore.json"

BUDGET_NOTE = (
    "random-search budget = round(s * eta / full_epochs * sigma) + K full trainings "
    "(cost of s partial trainings on a sigma-sized dataset, plus the K merges)"
)


def _seeds(cfg: ExperimentConfig, repeats: int | None) -> tuple[int, ...]:
    if repeats is None:
        return cfg.seeds
    if repeats < 1 or repeats > len(cfg.seeds):
        raise ValueError(f"repeats must be in [1, {len(cfg.seeds)}], got {repeats}")
    return cfg.seeds[:repeats]


def _oracle_for(out_dir: Path, cfg: ExperimentConfig, seed: int) -> OracleTable:
    return load_oracle(run_dir(out_dir, cfg, seed) / store.ORACLE)


def _champions(model, E: dict[int, float]) -> list[int]:
    champs = []
    for k in range(model.K):
        ids = members(model, k)
        if ids:
            champs.append(select_in_cluster([EvalRecord(a, E[a], cluster=k) for a in ids]))
    return champs


def _cluster_score(model, E: dict[int, float], y: dict[int, float]) -> float:
    scores = []
    for k in range(model.K):
        ids = members(model, k)
        if len(ids) < 2:
            continue
        score = ranking_score([EvalRecord(a, E[a], y[a], fully_trained=True) for a in ids])
        if score.pairs:
            scores.append(score.normalized)
    return float(np.mean(scores)) if scores else float("nan")


def _search_cell(
    cfg: ExperimentConfig,
    seed: int,
    logs: list[TrajectoryLog],
    full_features: dict[int, Any],
    K: int,
    eta: int,
    oracle_y: dict[int, float],
) -> dict[str, Any]:
    ids = [log.arch_id for log in logs]
    E = {log.arch_id: log.val_acc[eta - 1] for log in logs}
    points = [truncate(full_features[a], eta).matrix.reshape(-1) for a in ids]
    km = cfg.kmeans
    model = kmeans(points, K, seed, int(km["max_iter"]), float(km["tol"]), arch_ids=ids, refine=bool(km["refine"]))
    champs = _champions(model, E)
    winner = argmax_lowest_id({a: oracle_y[a] for a in champs})
    rank = winner_rank(oracle_y, winner)
    everything = [EvalRecord(a, E[a], oracle_y[a], fully_trained=True) for a in ids]
    return {
        "winner": winner,
        "winner_y": oracle_y[winner],
        "winner_rank": rank,
        "normalized_rank": normalized_rank(rank, len(oracle_y)),
        "global_score": ranking_score(everything).normalized if len(ids) >= 2 else float("nan"),
        "cluster_score": _cluster_score(model, E, oracle_y),
    }


def compare_strategies(cfg: ExperimentConfig, out_dir: str | Path, repeats: int | None = None) -> pd.DataFrame:
    """Evaluate every (K, η) cell of ``cfg.compare`` on each seed.

    Raises:
        FileNotFoundError: if a seed has no oracle table.
    """
    out_dir = Path(out_dir)
    K_values = [int(k) for k in cfg.compare["K_values"]]
    eta_values = [int(e) for e in cfg.compare["eta_values"]]
    if max(eta_values) > cfg.full_epochs or min(eta_values) < 1:
        raise ValueError(f"compare.eta_values must lie in [1, {cfg.full_epochs}]")
    rs_repeats = int(cfg.random_search["repeats"])

    rows: list[dict[str, Any]] = []
    for seed in _seeds(cfg, repeats):
        oracle = _oracle_for(out_dir, cfg, seed)
        oracle_y = oracle.y
        ctx = prepare(cfg, run_dir(out_dir, cfg, seed), seed)
        codes = sample_uniform(ctx.space, cfg.s, seed)
        logs = early_logs(ctx, codes, eta=max(eta_values))
        full_features = {log.arch_id: features_from_log(log, cfg.feature_source) for log in logs}
        for K in K_values:
            for eta in eta_values:
                try:
                    cell = _search_cell(cfg, seed, logs, full_features, K, eta, oracle_y)
                except ValueError as exc:
                    logger.warning("seed %d, K=%d, eta=%d skipped: %s", seed, K, eta, exc)
                    continue
                budget = min(baseline_budget(cfg.s, eta, cfg.full_epochs, cfg.sigma, K), ctx.space.size)
                rs = random_search_baseline(
                    ctx.space, budget, ctx.d, cfg.full_epochs, seed, ctx.settings, repeats=rs_repeats, lookup=oracle_y
                )
                rows.append(
                    {
                        "seed": seed,
                        "K": K,
                        "eta": eta,
                        **cell,
                        "rs_budget": budget,
                        "rs_mean_best_y": rs.mean_best_y,
                        "rs_mean_rank": float(np.mean([winner_rank(oracle_y, a) for a in rs.best_arch])),
                    }
                )
        logger.info("compare: seed %d done", seed)

    df = pd.DataFrame(rows)
    store.write_table(out_dir / COMPARE_CSV, df)
    (out_dir / COMPARE_REPORT).write_text(format_compare_report(df), encoding="utf-8")
    return df


def summarize_compare(df: pd.DataFrame) -> pd.DataFrame:
    """Mean/σ per (K, η) cell, plus top-3 and cluster-beats-global frequencies."""
    if df.empty:
        return df
    flags = df.assign(
        top3=df["winner_rank"] <= 3,
        cluster_beats_global=df["cluster_score"] >= df["global_score"],
    )
    return flags.groupby(["K", "eta"]).agg(
        seeds=("seed", "count"),
        winner_rank_mean=("winner_rank", "mean"),
        winner_rank_std=("winner_rank", "std"),
        normalized_rank_mean=("normalized_rank", "mean"),
        winner_y_mean=("winner_y", "mean"),
        global_score_mean=("global_score", "mean"),
        cluster_score_mean=("cluster_score", "mean"),
        top3_rate=("top3", "mean"),
        cluster_beats_global_rate=("cluster_beats_global", "mean"),
        rs_mean_best_y=("rs_mean_best_y", "mean"),
        rs_mean_rank=("rs_mean_rank", "mean"),
    )


def format_compare_report(df: pd.DataFrame) -> str:
    lines = [BUDGET_NOTE, f"ranking scores: {ORIENTATION_NOTE}", ""]
    table = summarize_compare(df)
    lines.append("no cells evaluated" if table.empty else table.to_string(float_format=lambda v: f"{v:.4f}"))
    return "\n".join(lines) + "\n"


def probe_sensitivity(cfg: ExperimentConfig, out_dir: str | Path, probe_repeats: int) -> pd.DataFrame:
    """Rerun feature extraction and selection with *probe_repeats* alternative probe sets."""
    if probe_repeats < 1:
        raise ValueError(f"probe_repeats must be >= 1, got {probe_repeats}")
    out_dir = Path(out_dir)
    rows = []
    for seed in cfg.seeds:
        oracle_y = _oracle_for(out_dir, cfg, seed).y
        base: RunContext = prepare(cfg, run_dir(out_dir, cfg, seed), seed)
        codes = sample_uniform(base.space, cfg.s, seed)
        for r in range(probe_repeats):
            ctx = dataclasses.replace(base, probe=draw_probe(base.d_reduced, cfg.probe_size, seed, repeat=r))
            logs = early_logs(ctx, codes)
            features = {log.arch_id: features_from_log(log, cfg.feature_source) for log in logs}
            cell = _search_cell(cfg, seed, logs, features, cfg.K, cfg.eta, oracle_y)
            rows.append({"seed": seed, "probe_repeat": r, **cell})
    df = pd.DataFrame(rows)
    store.write_table(out_dir / PROBE_CSV, df)
    for seed, group in df.groupby("seed"):
        logger.info(
            "probe sensitivity, seed %d: winner y %.4f ± %.4f over %d probe sets",
            seed,
            group["winner_y"].mean(),
            group["winner_y"].std(ddof=0),
            len(group),
        )
    return df


def early_stop_bias(cfg: ExperimentConfig, out_dir: str | Path, etas: list[int] | None = None) -> pd.DataFrame:
    """Spearman / Kendall correlation between E and parameter count over the whole space."""
    etas = sorted(set(etas or [1, max(1, cfg.full_epochs // 2)]))
    if etas[0] < 1 or etas[-1] > cfg.full_epochs:
        raise ValueError(f"etas must lie in [1, {cfg.full_epochs}]")
    out_dir = Path(out_dir)
    rows = []
    for seed in cfg.seeds:
        ctx = prepare(cfg, run_dir(out_dir, cfg, seed), seed)
        logs = early_logs(ctx, list(iter_space(ctx.space)), eta=etas[-1])
        params = [log.param_count for log in logs]
        for eta in etas:
            E = [log.val_acc[eta - 1] for log in logs]
            rows.append({"seed": seed, "eta": eta, "spearman": spearman(E, params), "kendall": kendall(E, params)})
    df = pd.DataFrame(rows)
    store.write_table(out_dir / BIAS_CSV, df)

    first, last = etas[0], etas[-1]
    pivot = df.pivot(index="seed", columns="eta", values="spearman")
    logger.info("bias: rho < 0 at eta=%d in %d/%d seeds", first, int((pivot[first] < 0).sum()), len(pivot))
    if last != first:
        shrinks = int((pivot[last].abs() < pivot[first].abs()).sum())
        logger.info("bias: |rho| shrinks from eta=%d to eta=%d in %d/%d seeds", first, last, shrinks, len(pivot))
    return df


def rankscore_table(records: list[EvalRecord]) -> dict[str, Any]:
    """Ranking fidelity (sign score, MSE, Spearman, Kendall) of E against y."""
    score = ranking_score(records)
    E = [r.E for r in records]
    y = [r.y for r in records]
    return {
        "records": len(records),
        "raw": score.raw,
        "concordance": score.concordance,
        "pairs": score.pairs,
        "normalized": score.normalized,
        "normalized_raw": score.normalized_raw,
        "fidelity_mse": fidelity_mse(records),
        "spearman": spearman(E, y),
        "kendall": kendall(E, y),
        "orientation": score.orientation,
    }


def rankscore_from_run(run_path: str | Path) -> dict[str, Any]:
    """Score the early-stop E of a pipeline run against its oracle table."""
    run_path = Path(run_path)
    logs, _ = store.load_trajectories(run_path / store.TRAJECTORIES)
    oracle_y = load_oracle(run_path / store.ORACLE).y
    records = [EvalRecord(log.arch_id, log.E, oracle_y[log.arch_id], fully_trained=True) for log in logs]
    result = rankscore_table(records)
    store.write_json(run_path / RANKSCORE_JSON, result)
    return result


def rankscore_from_csv(path: str | Path) -> dict[str, Any]:
    """Score a CSV with columns ``arch_id``, ``E``, ``y`` (rows without y are ignored)."""
    df = store.read_table(path).dropna(subset=["E", "y"])
    records = [EvalRecord(int(a), float(e), float(v), fully_trained=True) for a, e, v in zip(df["arch_id"], df["E"], df["y"])]
    return rankscore_table(records)
