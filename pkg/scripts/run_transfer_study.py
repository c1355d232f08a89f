"""Pretrain every pretext on disks, finetune on rings over five seeds, print the table.

    python scripts/run_transfer_study.py --out runs/transfer [--seeds 0 1 2 3 4]
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from segxfer.harness.experiments import DeskScale, RunCache, e90_per_seed, finals, transfer_study
from segxfer.harness.report import write_report


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/transfer")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--cache", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("segxfer.harness.training").setLevel(logging.WARNING)

    desk = DeskScale(seeds=tuple(args.seeds))
    logs = transfer_study(desk, RunCache(args.cache))
    out = Path(args.out)
    (out / "runlogs").mkdir(parents=True, exist_ok=True)
    for label, runlog in logs.items():
        (out / "runlogs" / (label.replace("/", "_") + ".csv")).write_text(runlog.to_csv())
    write_report({k.replace("/", "_"): v for k, v in logs.items()}, out)
    print(f"{'arm':22s} {'final dice per seed':40s} mean    e90 per seed")
    for label, runlog in logs.items():
        f = finals(runlog)
        print(f"{label:22s} {str(np.round(f, 3)):40s} {f.mean():.3f}   {e90_per_seed(runlog)}")


if __name__ == "__main__":
    main()
