"""Desk-scale transfer studies: pretext pretraining, scenario finetuning, CKA.

Every pretraining and finetuning run is cached on disk under a key built from
its config, seed and a hash of the package sources, so repeated acceptance runs
only pay for what changed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from ..cka import extract_features, similarity_matrix
from ..datagen import DatasetSpec, make_dataset, multiclass_scenes, stack
from ..transfer import Checkpoint, decode_checkpoint, encode_checkpoint
from ..unet import UNetConfig
from .config import ExperimentConfig, LogConfig, LossConfig, OptimConfig
from .report import epochs_to_fraction, final_dice
from .training import RunLog, finetune, pretrain

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parents[1]


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(p.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get("SEGXFER_CACHE", Path.cwd() / ".segxfer_cache"))


@dataclass
class DeskScale:
    """Sizes for the transfer studies, chosen to fit a single CPU core."""

    image_size: int = 32
    depth: int = 3
    base_channels: int = 8
    pretext_kind: str = "disk"
    downstream_kind: str = "ring"
    pretext_samples: int = 400
    downstream_samples: int = 600
    fraction: float = 0.05
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pretrain_seed: int = 0
    pretrain_epochs: dict = field(default_factory=lambda: {"seg": 40, "cls": 40, "simclr": 40, "conrec": 20})
    finetune_epochs: int = 80
    eval_period: int = 2
    finetune_eval_period: int = 4
    eval_max: int = 120
    lr: float = 2e-3
    batch_size: int = 16
    finetune_batch_size: int = 8
    finetune_schedule: str = "cosine"
    conrec_lambda: float = 1.0
    # similarity study
    cka_kinds: tuple[str, ...] = ("disk", "ring", "cross")
    cka_class_kinds: tuple[str, ...] = ("disk", "ring", "cross", "rectangle")
    cka_samples: int = 400
    cka_epochs: int = 40
    cka_seeds: tuple[int, ...] = (0, 1, 2)
    cka_probes: int = 64

    def unet(self) -> UNetConfig:
        return UNetConfig(depth=self.depth, base_channels=self.base_channels, input_size=self.image_size,
                          num_classes=max(2, len(self.cka_class_kinds)))

    def data(self, n: int, kinds, task: str = "segmentation", seed: int = 0) -> DatasetSpec:
        return DatasetSpec(n_samples=n, image_size=self.image_size, task=task, kinds=tuple(kinds), seed=seed)

    def config(self, task: str, data: DatasetSpec, epochs: int, schedule: str = "constant",
               **extra) -> ExperimentConfig:
        extra.setdefault("batch_size", self.batch_size)
        extra.setdefault("eval_period", self.eval_period)
        return ExperimentConfig(task=task, data=data, unet=self.unet(),
                                optim=OptimConfig(lr=self.lr, schedule=schedule),
                                loss=LossConfig(lambda_contrastive=self.conrec_lambda),
                                log=LogConfig(wallclock=False), epochs=epochs, **extra)


class RunCache:
    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else default_cache_dir()
        self.version = source_hash()

    def key(self, kind: str, payload: dict) -> Path:
        blob = json.dumps({"kind": kind, "src": self.version, **payload}, sort_keys=True, default=str)
        return self.root / kind / (hashlib.sha256(blob.encode()).hexdigest()[:20])

    def pretrain_path(self, cfg: ExperimentConfig, seed: int) -> Path:
        return self.key("pretrain", {"cfg": dataclasses.asdict(cfg), "seed": seed}).with_suffix(".sxl")

    def finetune_path(self, cfg: ExperimentConfig, scenario: str, seed: int, ckpt_id: str) -> Path:
        return self.key("finetune", {"cfg": dataclasses.asdict(cfg), "scenario": scenario, "seed": seed,
                                     "ckpt": ckpt_id}).with_suffix(".csv")

    def pretrain(self, cfg: ExperimentConfig, seed: int, samples=None) -> Checkpoint:
        path = self.pretrain_path(cfg, seed)
        if path.exists():
            return decode_checkpoint(path.read_bytes(), str(path))
        log.info("pretraining %s seed %d", cfg.task, seed)
        result = pretrain(cfg, samples if samples is not None else make_dataset(cfg.data), seed)
        raw = encode_checkpoint(result.params, dataclasses.asdict(cfg.unet), result.meta)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
        return decode_checkpoint(raw)

    def finetune(self, cfg: ExperimentConfig, ckpt: Checkpoint | None, scenario: str, seed: int,
                 samples=None, ckpt_id: str = "") -> RunLog:
        path = self.finetune_path(cfg, scenario, seed, ckpt_id)
        if path.exists():
            return RunLog.from_csv(path.read_text())
        log.info("finetuning %s (%s) seed %d", scenario, ckpt_id or "-", seed)
        runlog = finetune(cfg, samples if samples is not None else make_dataset(cfg.data), seed,
                          ckpt if scenario != "random-init" else None, scenario)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(runlog.to_csv())
        return runlog


# ---------------------------------------------------------------- transfer study

# (label, pretext task, scenario); "scenario 2" is cls-enc, "scenario 4" seg-enc
TRANSFER_ARMS = (
    ("random-init", None, "random-init"),
    ("seg/seg-enc-dec", "seg", "seg-enc-dec"),
    ("seg/seg-enc", "seg", "seg-enc"),
    ("conrec/seg-enc-dec", "conrec", "seg-enc-dec"),
    ("conrec/seg-enc", "conrec", "seg-enc"),
    ("cls/cls-enc", "cls", "cls-enc"),
    ("simclr/cls-enc", "simclr", "cls-enc"),
)


def pretext_dataset(desk: DeskScale, task: str) -> DatasetSpec:
    if task == "cls":
        return desk.data(desk.pretext_samples, [desk.pretext_kind], task="classification")
    return desk.data(desk.pretext_samples, [desk.pretext_kind])


def transfer_study(desk: DeskScale, cache: RunCache | None = None,
                   arms=TRANSFER_ARMS) -> dict[str, RunLog]:
    """Finetune every arm over ``desk.seeds``; returns one multi-seed RunLog per arm."""
    cache = cache or RunCache()
    ckpts: dict[str, Checkpoint] = {}
    ckpt_ids: dict[str | None, str] = {None: ""}
    for _, task, _ in arms:
        if task is not None and task not in ckpts:
            cfg = desk.config(task, pretext_dataset(desk, task), desk.pretrain_epochs[task])
            ckpts[task] = cache.pretrain(cfg, desk.pretrain_seed)
            ckpt_ids[task] = cache.pretrain_path(cfg, desk.pretrain_seed).stem
    down_cfg = desk.config("seg", desk.data(desk.downstream_samples, [desk.downstream_kind], seed=1),
                           desk.finetune_epochs, fraction=desk.fraction, eval_max=desk.eval_max,
                           batch_size=desk.finetune_batch_size, eval_period=desk.finetune_eval_period,
                           schedule=desk.finetune_schedule)
    samples = None
    out = {}
    for label, task, scenario in arms:
        runlog = RunLog()
        for seed in desk.seeds:
            ckpt_id = ckpt_ids[task]
            if samples is None and not cache.finetune_path(down_cfg, scenario, seed, ckpt_id).exists():
                samples = make_dataset(down_cfg.data)
            one = cache.finetune(down_cfg, ckpts.get(task), scenario, seed, samples, ckpt_id)
            for r in one.records:
                runlog.add(r)
        out[label] = runlog
    return out


def finals(runlog: RunLog) -> np.ndarray:
    d = final_dice(runlog)
    return np.array([d[s] for s in sorted(d)])


def e90_per_seed(runlog: RunLog) -> np.ndarray:
    seeds = sorted({r.seed for r in runlog.records})
    return np.array([epochs_to_fraction(runlog.for_seed(s)) for s in seeds])


def sign_test(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided p-value that a > b more often than chance (ties dropped)."""
    diff = np.asarray(a) - np.asarray(b)
    wins, n = int(np.sum(diff > 0)), int(np.sum(diff != 0))
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------- similarity study

@dataclass
class SimilarityResult:
    names: list[str]
    matrices: dict[int, np.ndarray]  # per seed

    def seg_within(self, seed: int) -> float:
        m, k = self.matrices[seed], len(self.names) - 1
        return float(np.mean([m[i, j] for i in range(k) for j in range(i + 1, k)]))

    def seg_vs_cls(self, seed: int) -> float:
        m, k = self.matrices[seed], len(self.names) - 1
        return float(np.mean([m[i, k] for i in range(k)]))


def similarity_study(desk: DeskScale, cache: RunCache | None = None) -> SimilarityResult:
    """Segmentation pretexts per kind plus one multiclass pretext, all on the same scenes."""
    cache = cache or RunCache()
    kinds = tuple(desk.cka_class_kinds)
    spec = desk.data(desk.cka_samples, kinds, task="multiclass", seed=2)
    scenes = multiclass_scenes(spec)
    probe = make_dataset(desk.data(desk.cka_probes, kinds, task="multiclass", seed=3))
    probe_images, _, _ = stack(probe)
    names = [f"seg-{k}" for k in desk.cka_kinds] + ["cls-multiclass"]
    matrices = {}
    for seed in desk.cka_seeds:
        feats = []
        for kind in desk.cka_kinds:
            # same scenes, masks of one kind; scenes lacking that kind keep an empty mask
            samples = [dataclasses.replace(s, label=None, mask=masks[kind]) for s, masks in scenes]
            cfg = desk.config("seg", spec, desk.cka_epochs, name=f"seg-{kind}")
            ckpt = cache.pretrain(cfg, seed, samples)
            feats.append(extract_features(ckpt.to_params(), probe_images, f"seg-{kind}"))
        cfg = desk.config("cls", spec, desk.cka_epochs, name="cls-multiclass")
        ckpt = cache.pretrain(cfg, seed, [s for s, _ in scenes])
        feats.append(extract_features(ckpt.to_params(), probe_images, "cls-multiclass"))
        matrices[seed] = similarity_matrix(feats)
    return SimilarityResult(names, matrices)

