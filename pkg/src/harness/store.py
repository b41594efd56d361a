"""Store — persistence of every pipeline artefact.

File formats:
    *.json       sort_keys, indent 2, trailing newline
    *.jsonl      one TrajectoryLog per line (+ its feature matrix)
    *.csv        pandas, read back with round-trip float precision
    supernet.npz shared supernet weights (next to supernet.json)
    *.txt        one canonical architecture string per line

Floats are written with their shortest round-trip representation, so
``load(save(x)) == x`` for every artefact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd

from src.cluster_engine.kmeans import ClusterModel
from src.ml_engine.trainer import TrajectoryLog
from src.search_engine.search_space import ArchCode, SearchSpace, build_layerwise_space, parse_arch
from src.search_engine.supernet import SupernetState

TRAJECTORIES = "trajectories.jsonl"
CLUSTERS = "clusters.json"
SELECTION = "selection.json"
RESULTS = "results.csv"
SUMMARY = "summary.json"
REPORT = "report.txt"
ORACLE = "oracle.csv"
SAMPLED = "sampled_archs.txt"
STATE = "state.json"
SUPERNET_JSON = "supernet.json"
SUPERNET_NPZ = "supernet.npz"


# ── JSON / CSV ────────────────────────────────────────────────


def write_json(path: str | Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing artefact: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_table(path: str | Path, df: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def read_table(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing table: {path}")
    return pd.read_csv(path, float_precision="round_trip")


# ── Trajectories ──────────────────────────────────────────────


def _log_to_record(log: TrajectoryLog, features: np.ndarray | None) -> dict[str, Any]:
    record: dict[str, Any] = {
        "arch_id": log.arch_id,
        "arch": log.arch,
        "eta": log.eta,
        "E": log.E,
        "val_acc": list(log.val_acc),
        "params": log.param_count,
        "flops": log.flops,
        "layer_kinds": list(log.layer_kinds),
        "probe_outputs": [[v.astype(np.float64).tolist() for v in epoch] for epoch in log.probe_outputs],
    }
    if log.param_snapshots is not None:
        record["param_snapshots"] = [
            [v.astype(np.float64).tolist() for v in epoch] for epoch in log.param_snapshots
        ]
    if features is not None:
        record["features"] = np.asarray(features, dtype=np.float64).tolist()
    return record


def _record_to_log(record: dict[str, Any]) -> TrajectoryLog:
    snaps = record.get("param_snapshots")
    return TrajectoryLog(
        arch_id=int(record["arch_id"]),
        arch=record["arch"],
        eta=int(record["eta"]),
        val_acc=[float(v) for v in record["val_acc"]],
        probe_outputs=[[np.asarray(v, dtype=np.float64) for v in epoch] for epoch in record["probe_outputs"]],
        param_snapshots=None
        if snaps is None
        else [[np.asarray(v, dtype=np.float64) for v in epoch] for epoch in snaps],
        param_count=int(record["params"]),
        flops=int(record["flops"]),
        layer_kinds=list(record.get("layer_kinds", [])),
    )


def save_trajectories(
    path: str | Path,
    logs: Iterable[TrajectoryLog],
    features: dict[int, np.ndarray] | None = None,
) -> Path:
    """Write one JSON line per log, sorted by arch_id; ``features`` maps arch_id → matrix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = features or {}
    with open(path, "w", encoding="utf-8") as fh:
        for log in sorted(logs, key=lambda l: l.arch_id):
            fh.write(json.dumps(_log_to_record(log, features.get(log.arch_id)), sort_keys=True) + "\n")
    return path


def load_trajectories(path: str | Path) -> tuple[list[TrajectoryLog], dict[int, np.ndarray]]:
    """Inverse of :func:`save_trajectories`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing trajectory store: {path}")
    logs: list[TrajectoryLog] = []
    features: dict[int, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            log = _record_to_log(record)
            logs.append(log)
            if "features" in record:
                features[log.arch_id] = np.asarray(record["features"], dtype=np.float64)
    return logs, features


# ── Clusters ──────────────────────────────────────────────────


def cluster_model_to_dict(model: ClusterModel, names: dict[int, str] | None = None) -> dict[str, Any]:
    names = names or {}
    return {
        "K": model.K,
        "centroids": model.centroids.tolist(),
        "assignments": [
            {"arch_id": a, "arch": names.get(a, str(a)), "cluster": int(k)}
            for a, k in zip(model.arch_ids, model.labels)
        ],
        "inertia": model.inertia,
        "iterations": model.iterations_run,
        "inertia_history": list(model.inertia_history),
    }


def cluster_model_from_dict(data: dict[str, Any]) -> ClusterModel:
    rows = data["assignments"]
    return ClusterModel(
        K=int(data["K"]),
        centroids=np.asarray(data["centroids"], dtype=np.float64),
        arch_ids=tuple(int(r["arch_id"]) for r in rows),
        labels=np.asarray([int(r["cluster"]) for r in rows], dtype=np.int64),
        inertia=float(data["inertia"]),
        iterations_run=int(data["iterations"]),
        inertia_history=[float(v) for v in data.get("inertia_history", [])],
    )


def save_cluster_model(path: str | Path, model: ClusterModel, names: dict[int, str] | None = None) -> Path:
    return write_json(path, cluster_model_to_dict(model, names))


def load_cluster_model(path: str | Path) -> ClusterModel:
    return cluster_model_from_dict(read_json(path))


# ── Architecture lists ────────────────────────────────────────


def save_archs(path: str | Path, codes: Iterable[ArchCode]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{c.canonical_string}\n" for c in codes), encoding="utf-8")
    return path


def load_archs(path: str | Path, space: SearchSpace) -> list[ArchCode]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing architecture list: {path}")
    return [parse_arch(space, line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ── Supernet checkpoint ───────────────────────────────────────


def weight_digest(weights: dict[str, list[np.ndarray]]) -> str:
    """sha256 over the shared weights in key order."""
    h = hashlib.sha256()
    for key in sorted(weights):
        h.update(key.encode("utf-8"))
        for arr in weights[key]:
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_supernet(out_dir: str | Path, state: SupernetState) -> Path:
    """Write ``supernet.json`` (scores, metadata, digest) and ``supernet.npz`` (weights)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {f"{key}#{j}": arr for key, group in state.weights.items() for j, arr in enumerate(group)}
    np.savez(out_dir / SUPERNET_NPZ, **arrays)
    space = state.space
    return write_json(
        out_dir / SUPERNET_JSON,
        {
            "blocks": space.num_layers,
            "ops": list(state.op_names),
            "a": state.a.tolist(),
            "weight_digest": weight_digest(state.weights),
            "epochs_trained": state.epochs_trained,
            "prob_history": [p.tolist() for p in state.prob_history],
            "base_channels": space.base_channels,
            "input_shape": list(space.input_shape),
            "num_classes": space.num_classes,
        },
    )


def load_supernet(out_dir: str | Path) -> SupernetState:
    """Inverse of :func:`save_supernet`.

    Raises:
        ValueError: if the weights do not match the recorded digest.
    """
    out_dir = Path(out_dir)
    meta = read_json(out_dir / SUPERNET_JSON)
    space = build_layerwise_space(
        num_blocks=int(meta["blocks"]),
        ops=list(meta["ops"]),
        base_channels=int(meta["base_channels"]),
        input_shape=tuple(meta["input_shape"]),
        num_classes=int(meta["num_classes"]),
        require_core_ops=False,
    )
    weights: dict[str, list[np.ndarray]] = {}
    with np.load(out_dir / SUPERNET_NPZ) as npz:
        for name in sorted(npz.files, key=lambda n: (n.rsplit("#", 1)[0], int(n.rsplit("#", 1)[1]))):
            key, _ = name.rsplit("#", 1)
            weights.setdefault(key, []).append(npz[name])
    if weight_digest(weights) != meta["weight_digest"]:
        raise ValueError(f"supernet weights in {out_dir} do not match the recorded digest")
    return SupernetState(
        space=space,
        a=np.asarray(meta["a"], dtype=np.float64),
        weights=weights,
        epochs_trained=int(meta["epochs_trained"]),
        prob_history=[np.asarray(p, dtype=np.float64) for p in meta.get("prob_history", [])],
    )


# ── Run state ─────────────────────────────────────────────────


def load_run_state(out_dir: str | Path) -> dict[str, Any]:
    path = Path(out_dir) / STATE
    if not path.exists():
        return {"config_digest": None, "completed": []}
    return read_json(path)


def save_run_state(out_dir: str | Path, digest: str, completed: list[str]) -> Path:
    return write_json(Path(out_dir) / STATE, {"config_digest": digest, "completed": list(completed)})
