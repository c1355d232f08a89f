"""``segxfer datagen|pretrain|finetune|cka|report --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from ..cka import extract_features, similarity_matrix, write_similarity_csv
from ..datagen import load_dataset, make_dataset, save_dataset, stack
from ..errors import ContractViolation
from ..transfer import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_value
from .report import read_runlogs, write_report
from .training import RunLog, finetune, pretrain

COMMANDS = ("datagen", "pretrain", "finetune", "cka", "report")


def _samples(cfg: ExperimentConfig):
    return load_dataset(cfg.dataset) if cfg.dataset else make_dataset(cfg.data)


def _summary(samples) -> str:
    _, masks, labels = stack(samples)
    parts = [f"samples={len(samples)}"]
    if labels is not None:
        counts = np.bincount(labels)
        parts.append("labels=" + ",".join(str(int(c)) for c in counts))
        parts.append(f"balance={counts.max() / len(samples):.3f}")
    if masks is not None:
        parts.append(f"positive_pixels={float(masks.mean()):.4f}")
        parts.append(f"empty_masks={int((masks.reshape(len(masks), -1).max(1) == 0).sum())}")
    return " ".join(parts)


def cmd_datagen(cfg: ExperimentConfig, out: Path) -> None:
    samples = make_dataset(cfg.data)
    save_dataset(samples, out)
    print(f"datagen {out} {_summary(samples)}")


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> None:
    samples = _samples(cfg)
    for seed in cfg.seeds:
        result = pretrain(cfg, samples, seed)
        stem = f"{cfg.name or cfg.task}_seed{seed}"
        path = save_checkpoint(result.params, out / f"{stem}.sxl", dataclasses.asdict(cfg.unet), result.meta)
        (out / "runlogs").mkdir(parents=True, exist_ok=True)
        (out / "runlogs" / f"{stem}.csv").write_text(result.runlog.to_csv(with_val_loss=True))
        print(f"pretrain {cfg.task} seed={seed} best_epoch={result.best_epoch} "
              f"val_loss={result.meta['best_val_loss']:.6f} checkpoint={path}")


def cmd_finetune(cfg: ExperimentConfig, out: Path) -> None:
    if cfg.scenario is None:
        raise ContractViolation("finetune needs 'scenario'", module="harness", code="config")
    ckpt = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    samples = _samples(cfg)
    runlog = RunLog()
    for seed in cfg.seeds:
        finetune(cfg, samples, seed, ckpt, cfg.scenario, runlog=runlog)
    finals = {}
    for r in runlog.records:
        finals[r.seed] = r.thr_dice
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.name or cfg.scenario}.csv"
    path.write_text(runlog.to_csv())
    values = np.array(list(finals.values()))
    for seed, v in finals.items():
        print(f"finetune {cfg.scenario} seed={seed} final_thr_dice={v:.6f}")
    print(f"finetune {cfg.scenario} mean={values.mean():.6f} std={values.std():.6f} runlog={path}")


def cmd_cka(cfg: ExperimentConfig, out: Path) -> None:
    if len(cfg.models) < 2:
        raise ContractViolation("cka needs at least two 'models' (name:checkpoint)", module="harness",
                                code="config")
    probe = load_dataset(cfg.probe) if cfg.probe else make_dataset(cfg.data)
    images, _, _ = stack(probe)
    names, feats = [], []
    for entry in cfg.models:
        name, _, path = entry.partition(":") if ":" in entry else ("", "", entry)
        names.append(name or Path(path).stem)
        feats.append(extract_features(load_checkpoint(path).to_params(), images, names[-1]))
    path = write_similarity_csv(out / "similarity.csv", names, similarity_matrix(feats))
    print(f"cka models={len(names)} probes={len(images)} matrix={path}")


def cmd_report(cfg: ExperimentConfig, out: Path) -> None:
    source = cfg.runlog_dir or str(out)
    curves, table = write_report(read_runlogs(source), out)
    print(f"report curves={curves} aggregate={table}")


HANDLERS = {"datagen": cmd_datagen, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "cka": cmd_cka,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segxfer", description="Segmentation transfer-learning laboratory")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    p.add_argument("--out", help="output directory (default: config 'out')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ContractViolation(f"--set expects KEY=VALUE, got {item!r}", module="harness", code="config")
            overrides[key.strip()] = parse_value(value)
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        cfg = load_config(args.config, overrides)
        out = Path(args.out or cfg.out)
        HANDLERS[args.command](cfg, out)
    except ContractViolation as e:
        print(f"ERR {e.module}:{e.code} {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
