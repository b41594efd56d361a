"""Pipeline — the divide-and-conquer search, staged and resumable.

Stages (each persists its artefact before the next one starts):

    sample    → sampled_archs.txt  (+ supernet.json/npz in supernet mode)
    early     → trajectories.jsonl (early-stopped training of every sample)
    features  → trajectories.jsonl (feature matrices added)
    cluster   → clusters.json
    select    → selection.json     (one champion per cluster)
    merge     → results.csv, summary.json, report.txt

``state.json`` records the completed stages and the config digest. A
rerun with the same config loads finished stages from disk and carries
on after the last one; a different config starts over.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.config import ExperimentConfig, config_digest
from src.errors import StageError
from src.cluster_engine.features import features_from_log
from src.cluster_engine.kmeans import ClusterModel, kmeans, members
from src.cluster_engine.selection import (
    SelectionResult,
    argmax_lowest_id,
    baseline_budget,
    merge,
    random_search_baseline,
    select_in_cluster,
)
from src.ml_engine.dataset import Dataset, ReducedSpec, dataset_from_spec, draw_probe, reduce_dataset
from src.ml_engine.evaluator import ORIENTATION_NOTE, EvalRecord, fidelity_mse, ranking_score
from src.ml_engine.trainer import TrainSettings, TrajectoryLog, run_jobs, train_early, train_full
from src.search_engine.search_space import ArchCode, SearchSpace, arch_from_index, sample_uniform
from src.search_engine.supernet import (
    SupernetState,
    arch_score,
    init_supernet,
    sample_archs,
    select_by_probability,
    train_supernet,
)

from . import store

logger = logging.getLogger(__name__)

STAGES: tuple[str, ...] = ("sample", "early", "features", "cluster", "select", "merge")


@dataclass
class RunContext:
    """Everything a stage needs for one root seed."""

    cfg: ExperimentConfig
    seed: int
    out_dir: Path
    space: SearchSpace
    d: Dataset
    d_reduced: Dataset
    probe: np.ndarray
    settings: TrainSettings

    @property
    def digest(self) -> str:
        return config_digest(self.cfg.with_seed(self.seed))


@dataclass
class PipelineResult:
    selection: SelectionResult
    summary: dict[str, Any]
    out_dir: Path


def prepare(cfg: ExperimentConfig, out_dir: str | Path, seed: int | None = None) -> RunContext:
    """Build the space, datasets and probe set of one run."""
    seed = cfg.seed if seed is None else int(seed)
    space = cfg.build_space()
    d = dataset_from_spec(cfg.dataset, space.input_shape, space.num_classes, seed)
    d_reduced = reduce_dataset(d, ReducedSpec(cfg.sigma, seed, cfg.stratified))
    probe = draw_probe(d_reduced, cfg.probe_size, seed)
    return RunContext(
        cfg=cfg,
        seed=seed,
        out_dir=Path(out_dir),
        space=space,
        d=d,
        d_reduced=d_reduced,
        probe=probe,
        settings=TrainSettings.from_config(cfg),
    )


def run_dir(out_dir: str | Path, cfg: ExperimentConfig, seed: int) -> Path:
    """Output directory of one seed: *out_dir* itself for single-seed configs."""
    out_dir = Path(out_dir)
    return out_dir if len(cfg.seeds) == 1 else out_dir / f"seed_{seed}"


# ── Stages ────────────────────────────────────────────────────


def stage_sample(ctx: RunContext) -> tuple[list[ArchCode], SupernetState | None]:
    """Draw the s candidate architectures (from the supernet in supernet mode)."""
    cfg = ctx.cfg
    state = None
    if cfg.mode == "supernet":
        sn = cfg.supernet
        state = init_supernet(ctx.space, ctx.seed)
        train_supernet(
            state,
            ctx.d_reduced,
            epochs=int(sn["epochs"]),
            warmup=int(sn["warmup"]),
            seed=ctx.seed,
            lr=cfg.lr,
            lr_a=float(sn["lr_a"]),
            batch_size=cfg.batch_size,
        )
        store.save_supernet(ctx.out_dir, state)
        codes = sample_archs(state, cfg.s, ctx.seed)
    else:
        codes = sample_uniform(ctx.space, cfg.s, ctx.seed)
    store.save_archs(ctx.out_dir / store.SAMPLED, codes)
    return codes, state


def early_logs(ctx: RunContext, codes: list[ArchCode], eta: int | None = None) -> list[TrajectoryLog]:
    """Early-stopped training of every code on the reduced dataset, sorted by arch_id."""
    eta = ctx.cfg.eta if eta is None else eta
    capture = ctx.cfg.feature_source == "param"

    def job(code: ArchCode) -> TrajectoryLog:
        _, log = train_early(code, ctx.d_reduced, eta, ctx.seed, ctx.probe, ctx.settings, capture_params=capture)
        return log

    return run_jobs(job, codes, workers=ctx.cfg.workers, key=lambda log: log.arch_id)


def stage_early(ctx: RunContext, codes: list[ArchCode]) -> list[TrajectoryLog]:
    logs = early_logs(ctx, codes)
    store.save_trajectories(ctx.out_dir / store.TRAJECTORIES, logs)
    return logs


def stage_features(ctx: RunContext, logs: list[TrajectoryLog]) -> dict[int, np.ndarray]:
    features = {log.arch_id: features_from_log(log, ctx.cfg.feature_source).matrix for log in logs}
    store.save_trajectories(ctx.out_dir / store.TRAJECTORIES, logs, features)
    return features


def stage_cluster(ctx: RunContext, logs: list[TrajectoryLog], features: dict[int, np.ndarray]) -> ClusterModel:
    ids = sorted(features)
    km = ctx.cfg.kmeans
    model = kmeans(
        [features[a].reshape(-1) for a in ids],
        ctx.cfg.K,
        ctx.seed,
        max_iter=int(km["max_iter"]),
        tol=float(km["tol"]),
        arch_ids=ids,
        refine=bool(km["refine"]),
    )
    names = {log.arch_id: log.arch for log in logs}
    store.save_cluster_model(ctx.out_dir / store.CLUSTERS, model, names)
    return model


def stage_select(
    ctx: RunContext,
    codes: list[ArchCode],
    logs: list[TrajectoryLog],
    model: ClusterModel,
    state: SupernetState | None,
) -> list[dict[str, Any]]:
    """One champion per non-empty cluster: argmax E, or the supernet score in supernet mode."""
    by_id = {c.index: c for c in codes}
    E = {log.arch_id: log.E for log in logs}
    score_mode = str(ctx.cfg.supernet["score_mode"])
    rows = []
    for k in range(model.K):
        ids = members(model, k)
        if not ids:
            continue
        if state is None:
            champ = select_in_cluster([EvalRecord(a, E[a], cluster=k) for a in ids])
        else:
            champ = select_by_probability([by_id[a] for a in ids], state, mode=score_mode).index
        row = {"cluster": k, "arch_id": champ, "arch": by_id[champ].canonical_string, "E": E[champ], "size": len(ids)}
        if state is not None:
            row["score_raw"] = arch_score(state, by_id[champ], "raw")
            row["score_log_softmax"] = arch_score(state, by_id[champ], "log_softmax")
        rows.append(row)
    store.write_json(
        ctx.out_dir / store.SELECTION,
        {"mode": ctx.cfg.mode, "score_mode": score_mode if state is not None else None, "champions": rows},
    )
    return rows


class _CountingTrainer:
    """``train_full`` wrapper that counts invocations."""

    def __init__(self) -> None:
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, code, d, epochs, seed, settings):
        with self._lock:
            self.calls += 1
        return train_full(code, d, epochs, seed, settings)


def stage_merge(
    ctx: RunContext,
    codes: list[ArchCode],
    logs: list[TrajectoryLog],
    model: ClusterModel,
    champions: list[dict[str, Any]],
) -> tuple[SelectionResult, dict[str, Any]]:
    cfg = ctx.cfg
    by_id = {c.index: c for c in codes}
    counter = _CountingTrainer()
    selection = merge(
        [by_id[int(row["arch_id"])] for row in champions],
        ctx.d,
        cfg.full_epochs,
        ctx.seed,
        ctx.settings,
        workers=cfg.workers,
        trainer=counter,
    )
    if counter.calls != len(champions):
        raise RuntimeError(f"cost accounting: {counter.calls} full trainings for {len(champions)} champions")
    selection.full_trainings = counter.calls

    rs_y, rs_budget, rs_trainings = None, None, 0
    if cfg.random_search["enabled"]:
        rs_budget = min(baseline_budget(cfg.s, cfg.eta, cfg.full_epochs, cfg.sigma, cfg.K), ctx.space.size)
        rs = random_search_baseline(
            ctx.space,
            rs_budget,
            ctx.d,
            cfg.full_epochs,
            ctx.seed,
            ctx.settings,
            repeats=int(cfg.random_search["repeats"]),
            workers=cfg.workers,
        )
        rs_y, rs_trainings = rs.mean_best_y, rs.full_trainings

    assignments = model.assignments
    results = pd.DataFrame(
        [
            {
                "arch": log.arch,
                "arch_id": log.arch_id,
                "cluster": assignments[log.arch_id],
                "E": log.E,
                "y": selection.champion_y.get(log.arch_id, math.nan),
                "params": log.param_count,
                "flops": log.flops,
                "selected": log.arch_id in selection.champions,
                "winner": log.arch_id == selection.winner,
            }
            for log in logs
        ]
    )
    store.write_table(ctx.out_dir / store.RESULTS, results)

    E = {log.arch_id: log.E for log in logs}
    trained = [EvalRecord(a, E[a], y, fully_trained=True) for a, y in sorted(selection.champion_y.items())]
    score = ranking_score(trained) if len(trained) >= 2 else None
    summary: dict[str, Any] = {
        "K": cfg.K,
        "eta": cfg.eta,
        "sigma": cfg.sigma,
        "s": cfg.s,
        "seed": ctx.seed,
        "mode": cfg.mode,
        "feature_source": cfg.feature_source,
        "winner": selection.winner,
        "winner_arch": by_id[selection.winner].canonical_string,
        "winner_y": selection.winner_accuracy,
        "rs_baseline_y": rs_y,
        "rs_budget": rs_budget,
        "ranking_score": None
        if score is None
        else {
            "raw": score.raw,
            "concordance": score.concordance,
            "pairs": score.pairs,
            "normalized": score.normalized,
            "normalized_raw": score.normalized_raw,
        },
        "fidelity_mse": fidelity_mse(trained) if len(trained) >= 2 else None,
        # only the merged champions carry a y; `rankscore` covers every sampled arch
        "ranking_scope": {"over": "champions", "records": len(trained)},
        "orientation": ORIENTATION_NOTE,
        "full_trainings": selection.full_trainings,
        "baseline_trainings": rs_trainings,
        "selection": selection.to_dict(),
        "config_digest": ctx.digest,
    }
    if cfg.mode == "supernet":
        winner_row = next(r for r in champions if int(r["arch_id"]) == selection.winner)
        summary["winner_scores"] = {"raw": winner_row["score_raw"], "log_softmax": winner_row["score_log_softmax"]}
    store.write_json(ctx.out_dir / store.SUMMARY, summary)
    (ctx.out_dir / store.REPORT).write_text(format_report(summary, results), encoding="utf-8")
    return selection, summary


def format_report(summary: dict[str, Any], results: pd.DataFrame) -> str:
    lines = [
        f"search winner : {summary['winner_arch']} (arch {summary['winner']})",
        f"winner y      : {summary['winner_y']:.4f}",
        f"K={summary['K']}  eta={summary['eta']}  sigma={summary['sigma']}  s={summary['s']}  seed={summary['seed']}",
        f"mode          : {summary['mode']} ({summary['feature_source']} features)",
        f"full trainings: {summary['full_trainings']} (+{summary['baseline_trainings']} random-search baseline)",
    ]
    if summary["rs_baseline_y"] is not None:
        lines.append(f"random search : mean best y {summary['rs_baseline_y']:.4f} at budget {summary['rs_budget']}")
    if summary["ranking_score"] is not None:
        over = summary["ranking_scope"]["records"]
        lines.append(
            f"ranking score over the {over} champions (normalized concordance): "
            f"{summary['ranking_score']['normalized']:+.3f}"
        )
        lines.append(f"fidelity MSE over the {over} champions: {summary['fidelity_mse']:.6g}")
    lines.append(f"orientation   : {summary['orientation']}")
    lines.append("")
    lines.append(results.sort_values(["cluster", "E"], ascending=[True, False]).to_string(index=False))
    return "\n".join(lines) + "\n"


# ── Orchestration ─────────────────────────────────────────────


def run_pipeline(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    seed: int | None = None,
    resume: bool = True,
    stop_after: str | None = None,
) -> PipelineResult | None:
    """Run (or resume) every stage for one root seed.

    Args:
        stop_after: Return ``None`` right after this stage has been persisted.

    Raises:
        StageError: naming the failed stage; completed stages stay on disk.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}, got '{stop_after}'")
    ctx = prepare(cfg, out_dir, seed)
    ctx.out_dir.mkdir(parents=True, exist_ok=True)

    saved = store.load_run_state(ctx.out_dir)
    completed: list[str] = []
    if resume and saved["config_digest"] == ctx.digest:
        completed = [s for s in STAGES if s in saved["completed"]]
        if completed:
            logger.info("resuming after stage '%s'", completed[-1])
    elif saved["config_digest"] is not None:
        logger.info("config changed since the last run in %s; starting over", ctx.out_dir)
    store.save_run_state(ctx.out_dir, ctx.digest, completed)

    codes: list[ArchCode] = []
    state: SupernetState | None = None
    logs: list[TrajectoryLog] = []
    features: dict[int, np.ndarray] = {}
    model: ClusterModel | None = None
    champions: list[dict[str, Any]] = []
    selection: SelectionResult | None = None
    summary: dict[str, Any] = {}

    for stage in STAGES:
        done = stage in completed
        try:
            if stage == "sample":
                if done:
                    codes = store.load_archs(ctx.out_dir / store.SAMPLED, ctx.space)
                    state = store.load_supernet(ctx.out_dir) if cfg.mode == "supernet" else None
                else:
                    codes, state = stage_sample(ctx)
            elif stage == "early":
                if done:
                    logs, _ = store.load_trajectories(ctx.out_dir / store.TRAJECTORIES)
                else:
                    logs = stage_early(ctx, codes)
            elif stage == "features":
                if done:
                    logs, features = store.load_trajectories(ctx.out_dir / store.TRAJECTORIES)
                else:
                    features = stage_features(ctx, logs)
            elif stage == "cluster":
                model = store.load_cluster_model(ctx.out_dir / store.CLUSTERS) if done else stage_cluster(ctx, logs, features)
            elif stage == "select":
                if done:
                    champions = store.read_json(ctx.out_dir / store.SELECTION)["champions"]
                else:
                    champions = stage_select(ctx, codes, logs, model, state)
            elif stage == "merge":
                if done:
                    summary = store.read_json(ctx.out_dir / store.SUMMARY)
                    selection = SelectionResult.from_dict(summary["selection"])
                else:
                    selection, summary = stage_merge(ctx, codes, logs, model, champions)
        except StageError:
            raise
        except Exception as exc:
            store.save_run_state(ctx.out_dir, ctx.digest, completed)
            raise StageError(stage, str(exc)) from exc

        if not done:
            completed.append(stage)
            store.save_run_state(ctx.out_dir, ctx.digest, completed)
            logger.info("stage %-8s done (%s)", stage, ctx.out_dir)
        if stage == stop_after:
            return None

    return PipelineResult(selection=selection, summary=summary, out_dir=ctx.out_dir)


def global_early_stopping(cfg: ExperimentConfig, seed: int | None = None) -> dict[str, Any]:
    """Plain early-stopping search: best E over all samples, then one full training."""
    ctx = prepare(cfg, Path("."), seed)
    codes = sample_uniform(ctx.space, cfg.s, ctx.seed)
    logs = early_logs(ctx, codes)
    winner = argmax_lowest_id({log.arch_id: log.E for log in logs})
    y, _ = train_full(arch_from_index(ctx.space, winner), ctx.d, cfg.full_epochs, ctx.seed, ctx.settings)
    return {"winner": winner, "winner_y": y, "E": next(log.E for log in logs if log.arch_id == winner)}
