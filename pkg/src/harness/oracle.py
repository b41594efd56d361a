"""Oracle — exhaustive full training of a desk-scale search space."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from src.ml_engine.dataset import Dataset
from src.ml_engine.trainer import TrainSettings, run_jobs, train_full
from src.search_engine.search_space import ORACLE_GUARD, ArchCode, SearchSpace, iter_space

from . import store

logger = logging.getLogger(__name__)

COLUMNS: list[str] = ["arch_id", "arch", "y", "params", "flops"]


@dataclass
class OracleTable:
    """Ground-truth accuracy of every architecture, indexed by arch_id."""

    frame: pd.DataFrame

    def __post_init__(self) -> None:
        self.frame = self.frame.sort_values("arch_id", kind="stable").reset_index(drop=True)

    @property
    def size(self) -> int:
        return len(self.frame)

    @property
    def y(self) -> dict[int, float]:
        return {int(a): float(v) for a, v in zip(self.frame["arch_id"], self.frame["y"])}

    @property
    def best(self) -> int:
        """arch_id of the highest y (ties: lowest arch_id)."""
        top = self.frame["y"].max()
        return int(self.frame.loc[self.frame["y"] == top, "arch_id"].min())

    def ranking(self) -> list[int]:
        """arch_ids from best to worst (ties by arch_id)."""
        ordered = self.frame.sort_values(["y", "arch_id"], ascending=[False, True], kind="stable")
        return [int(a) for a in ordered["arch_id"]]


def build_oracle(
    space: SearchSpace,
    d: Dataset,
    epochs: int,
    seed: int,
    settings: TrainSettings = TrainSettings(),
    workers: int = 1,
    guard: int = ORACLE_GUARD,
) -> OracleTable:
    """Fully train every architecture of *space*.

    Raises:
        ValueError: if the space exceeds *guard*.
    """
    codes = list(iter_space(space, limit=guard))
    logger.info("oracle: fully training %d architectures for %d epochs", len(codes), epochs)

    def job(code: ArchCode) -> dict:
        y, net = train_full(code, d, epochs, seed, settings)
        return {
            "arch_id": code.index,
            "arch": code.canonical_string,
            "y": y,
            "params": net.param_count,
            "flops": net.flops,
        }

    rows = run_jobs(job, codes, workers=workers, key=lambda r: r["arch_id"])
    table = OracleTable(pd.DataFrame(rows, columns=COLUMNS))
    logger.info("oracle: best arch %d with y=%.4f", table.best, table.y[table.best])
    return table


def save_oracle(path: str | Path, table: OracleTable) -> Path:
    return store.write_table(path, table.frame[COLUMNS])


def load_oracle(path: str | Path) -> OracleTable:
    """Read an oracle table.

    Raises:
        FileNotFoundError: if no oracle has been built at *path*.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No oracle at {path}; run the 'oracle' command first")
    frame = store.read_table(path)
    frame["arch"] = frame["arch"].astype(str)
    return OracleTable(frame)
