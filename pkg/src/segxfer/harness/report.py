"""Aggregation of finetuning RunLogs into curve and table CSVs."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import require
from .training import RunLog, RunRecord


def final_dice(runlog: RunLog) -> dict[int, float]:
    """Thresholded dice at the last logged epoch of each seed."""
    out: dict[int, float] = {}
    for r in runlog.records:
        out[r.seed] = r.thr_dice
    return out


def epochs_to_fraction(records: list[RunRecord], fraction: float = 0.9) -> int:
    """First logged epoch whose thresholded dice reaches ``fraction`` of the final value."""
    require(len(records) > 0, "empty run", module="report", code="empty")
    target = fraction * records[-1].thr_dice
    return next(r.epoch for r in records if r.thr_dice >= target)


@dataclass
class Aggregate:
    name: str
    n_seeds: int
    mean: float
    std: float  # population std over seeds
    e90_mean: float
    e90_median: float


def aggregate(name: str, runlog: RunLog) -> Aggregate:
    seeds = sorted({r.seed for r in runlog.records})
    require(len(seeds) > 0, f"runlog {name!r} has no records", module="report", code="empty")
    finals = np.array([final_dice(runlog)[s] for s in seeds])
    e90 = np.array([epochs_to_fraction(runlog.for_seed(s)) for s in seeds], dtype=float)
    return Aggregate(name, len(seeds), float(finals.mean()), float(finals.std()), float(e90.mean()),
                     float(np.median(e90)))


def mean_curve(runlog: RunLog) -> list[tuple[int, float, float]]:
    """(epoch, mean thr dice, mean soft dice) over the seeds logged at that epoch."""
    epochs = sorted({r.epoch for r in runlog.records})
    rows = []
    for e in epochs:
        recs = [r for r in runlog.records if r.epoch == e]
        rows.append((e, float(np.mean([r.thr_dice for r in recs])), float(np.mean([r.soft_dice for r in recs]))))
    return rows


def read_runlogs(directory: str | os.PathLike) -> dict[str, RunLog]:
    directory = Path(directory)
    require(directory.is_dir(), f"{directory} is not a directory", module="report", code="missing")
    logs = {p.stem: RunLog.from_csv(p.read_text()) for p in sorted(directory.glob("*.csv"))
            if p.name not in ("aggregate.csv", "curves.csv")}
    logs = {k: v for k, v in logs.items() if v.records}
    require(len(logs) > 0, f"no RunLog CSVs in {directory}", module="report", code="empty")
    return logs


def write_report(logs: dict[str, RunLog], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = ["config,epoch,mean_thr_dice,mean_soft_dice"]
    table = ["config,n_seeds,final_mean,final_std,epochs_to_90_mean,epochs_to_90_median"]
    for name, runlog in logs.items():
        curves += [f"{name},{e},{thr:.6f},{soft:.6f}" for e, thr, soft in mean_curve(runlog)]
        a = aggregate(name, runlog)
        table.append(f"{name},{a.n_seeds},{a.mean:.6f},{a.std:.6f},{a.e90_mean:.3f},{a.e90_median:.3f}")
    curves_path, table_path = out_dir / "curves.csv", out_dir / "aggregate.csv"
    curves_path.write_text("\n".join(curves) + "\n")
    table_path.write_text("\n".join(table) + "\n")
    return curves_path, table_path
