"""Seg pretexts on disk/ring/cross and one multiclass pretext on shared scenes; CKA per seed.

    python scripts/run_similarity_study.py --out runs/similarity
"""

import argparse
import logging
from pathlib import Path

from segxfer.cka import write_similarity_csv
from segxfer.harness.experiments import DeskScale, RunCache, similarity_study


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/similarity")
    p.add_argument("--cache", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("segxfer.harness.training").setLevel(logging.WARNING)

    result = similarity_study(DeskScale(), RunCache(args.cache))
    for seed, matrix in result.matrices.items():
        path = write_similarity_csv(Path(args.out) / f"similarity_seed{seed}.csv", result.names, matrix)
        print(f"seed {seed}: seg-seg {result.seg_within(seed):.3f}  seg-cls {result.seg_vs_cls(seed):.3f}  {path}")


if __name__ == "__main__":
    main()
