"""DC-NAS toolkit — command-line entry point.

Usage::

    python -m src.main [--config PATH] [--seed N] [--workers N] [--out DIR] <command> [...]

Commands:
    oracle           fully train every architecture (ground truth, per seed)
    pipeline         run / resume the full search (per seed)
    compare          K × η grid against the oracle (+ probe sensitivity)
    bias             early-stopping bias study (E vs parameter count)
    features         recompute feature matrices from trajectories.jsonl
    cluster          k-means over the stored features
    select           one champion per cluster
    supernet-train   train the weight-sharing supernet
    supernet-sample  sample architectures from a trained supernet
    rankscore        ranking fidelity of E against ground truth

Exit codes: 0 on success, 2 when a pipeline stage fails (``stage <name>: ...``
on stderr), 1 for any other error. The Streamlit results browser lives in
``app/streamlit_app.py``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from src.config import ExperimentConfig, load_config, setup_hardware
from src.errors import DCNASError, StageError

logger = logging.getLogger("src.main")

LOG_FORMAT = "[%(asctime)s] %(levelname)s:%(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcnas", description="Divide-and-conquer NAS toolkit")
    parser.add_argument("--config", type=Path, default=None, help="experiment config (YAML or JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seeds with one seed")
    parser.add_argument("--workers", type=int, default=None, help="training worker threads")
    parser.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("oracle", help="exhaustively train the search space")
    p = sub.add_parser("pipeline", help="run the search")
    p.add_argument("--no-resume", action="store_true", help="ignore completed stages on disk")

    p = sub.add_parser("compare", help="K x eta grid against the oracle")
    p.add_argument("--repeats", type=int, default=None, help="number of config seeds to use")
    p.add_argument("--probe-repeats", type=int, default=0, help="also run the probe-sensitivity study")

    p = sub.add_parser("bias", help="early-stopping bias study")
    p.add_argument("--etas", type=int, nargs="+", default=None)

    p = sub.add_parser("features", help="recompute features from stored trajectories")
    p.add_argument("--source", choices=["output", "param"], default=None)
    p.add_argument("--eta", type=int, default=None, help="truncate to the first ETA epochs")

    p = sub.add_parser("cluster", help="k-means over stored features")
    p.add_argument("--K", type=int, default=None)

    sub.add_parser("select", help="one champion per cluster")
    sub.add_parser("supernet-train", help="train the weight-sharing supernet")
    p = sub.add_parser("supernet-sample", help="sample architectures from a trained supernet")
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("rankscore", help="ranking fidelity of E against y")
    p.add_argument("--table", type=Path, default=None, help="CSV with arch_id,E,y (default: run dir + oracle)")
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _resolve_config(args: argparse.Namespace, cpu_count: int) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    workers = args.workers if args.workers is not None else cfg.workers
    if workers > cpu_count:
        logger.info("capping workers at %d CPUs", cpu_count)
        workers = cpu_count
    if workers != cfg.workers:
        changes["workers"] = workers
    return cfg.with_overrides(**changes) if changes else cfg


# ── Commands ──────────────────────────────────────────────────


def cmd_oracle(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.oracle import build_oracle, save_oracle
    from src.harness.pipeline import prepare, run_dir

    for seed in cfg.seeds:
        ctx = prepare(cfg, run_dir(args.out, cfg, seed), seed)
        table = build_oracle(ctx.space, ctx.d, cfg.full_epochs, seed, ctx.settings, workers=cfg.workers)
        path = save_oracle(ctx.out_dir / store.ORACLE, table)
        print(f"seed {seed}: best {table.frame.loc[table.frame['arch_id'] == table.best, 'arch'].iloc[0]} "
              f"(y={table.y[table.best]:.4f}) -> {path}")


def cmd_pipeline(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness.pipeline import run_dir, run_pipeline

    for seed in cfg.seeds:
        result = run_pipeline(cfg, run_dir(args.out, cfg, seed), seed=seed, resume=not args.no_resume)
        s = result.summary
        print(f"seed {seed}: winner {s['winner_arch']} y={s['winner_y']:.4f} "
              f"({s['full_trainings']} full trainings) -> {result.out_dir}")


def cmd_compare(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness.compare import format_compare_report, compare_strategies, probe_sensitivity

    df = compare_strategies(cfg, args.out, repeats=args.repeats)
    print(format_compare_report(df))
    if args.probe_repeats:
        probe = probe_sensitivity(cfg, args.out, args.probe_repeats)
        print(probe.groupby("seed")["winner_y"].agg(["mean", "std", "count"]).to_string())


def cmd_bias(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness.compare import early_stop_bias

    df = early_stop_bias(cfg, args.out, etas=args.etas)
    print(df.to_string(index=False))


def cmd_features(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.cluster_engine.features import features_from_log, truncate
    from src.harness import store
    from src.harness.pipeline import run_dir

    path = run_dir(args.out, cfg, cfg.seed) / store.TRAJECTORIES
    logs, _ = store.load_trajectories(path)
    source = args.source or cfg.feature_source
    features = {}
    for log in logs:
        f = features_from_log(log, source)
        features[log.arch_id] = (truncate(f, args.eta) if args.eta else f).matrix
    store.save_trajectories(path, logs, features)
    print(f"{len(features)} {source} feature matrices -> {path}")


def cmd_cluster(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.pipeline import prepare, run_dir, stage_cluster

    if args.K is not None:
        cfg = cfg.with_overrides(K=args.K)
    ctx = prepare(cfg, run_dir(args.out, cfg, cfg.seed))
    logs, features = store.load_trajectories(ctx.out_dir / store.TRAJECTORIES)
    if not features:
        raise DCNASError(f"no features in {ctx.out_dir / store.TRAJECTORIES}; run 'features' first")
    model = stage_cluster(ctx, logs, features)
    print(f"K={model.K}: inertia {model.inertia:.6g} after {model.iterations_run} iterations")


def cmd_select(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.pipeline import prepare, run_dir, stage_select

    ctx = prepare(cfg, run_dir(args.out, cfg, cfg.seed))
    codes = store.load_archs(ctx.out_dir / store.SAMPLED, ctx.space)
    logs, _ = store.load_trajectories(ctx.out_dir / store.TRAJECTORIES)
    model = store.load_cluster_model(ctx.out_dir / store.CLUSTERS)
    state = store.load_supernet(ctx.out_dir) if cfg.mode == "supernet" else None
    for row in stage_select(ctx, codes, logs, model, state):
        print(f"cluster {row['cluster']}: {row['arch']} (E={row['E']:.4f}, {row['size']} members)")


def cmd_supernet_train(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.pipeline import prepare, run_dir
    from src.search_engine.supernet import init_supernet, probabilities, train_supernet

    ctx = prepare(cfg, run_dir(args.out, cfg, cfg.seed))
    sn = cfg.supernet
    state = init_supernet(ctx.space, ctx.seed)
    train_supernet(state, ctx.d_reduced, int(sn["epochs"]), int(sn["warmup"]), ctx.seed,
                   lr=cfg.lr, lr_a=float(sn["lr_a"]), batch_size=cfg.batch_size)
    path = store.save_supernet(ctx.out_dir, state)
    for b, row in enumerate(probabilities(state)):
        print(f"block {b}: " + "  ".join(f"{name}={p:.3f}" for name, p in zip(state.op_names, row)))
    print(f"-> {path}")


def cmd_supernet_sample(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.pipeline import run_dir
    from src.search_engine.supernet import sample_archs

    out = run_dir(args.out, cfg, cfg.seed)
    state = store.load_supernet(out)
    codes = sample_archs(state, args.count or cfg.s, cfg.seed)
    path = store.save_archs(out / store.SAMPLED, codes)
    print(f"{len(codes)} architectures -> {path}")


def cmd_rankscore(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    from src.harness import store
    from src.harness.compare import rankscore_from_csv, rankscore_from_run
    from src.harness.pipeline import run_dir

    if args.table is not None:
        result = rankscore_from_csv(args.table)
        store.write_json(args.out / "rankscore.json", result)
    else:
        result = rankscore_from_run(run_dir(args.out, cfg, cfg.seed))
    for key in ("records", "concordance", "pairs", "normalized", "fidelity_mse", "spearman", "kendall"):
        print(f"{key:>13}: {result[key]}")
    print(f"  orientation: {result['orientation']}")


COMMANDS = {
    "oracle": cmd_oracle,
    "pipeline": cmd_pipeline,
    "compare": cmd_compare,
    "bias": cmd_bias,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "select": cmd_select,
    "supernet-train": cmd_supernet_train,
    "supernet-sample": cmd_supernet_sample,
    "rankscore": cmd_rankscore,
}


def main(argv: list[str] | None = None) -> int:
    """Parse arguments, run one command and return the exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        env = setup_hardware()
        cfg = _resolve_config(args, env["cpu_count"])
        COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (DCNASError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
