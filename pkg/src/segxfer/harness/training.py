"""Pretext training and scenario finetuning loops."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..augment import AugmentConfig, make_conrec_batch, make_views, random_flip_crop
from ..datagen import Sample, split_indices, stack
from ..errors import ContractViolation, require
from ..losses import conrec_loss, dice_loss, dice_score, ntxent_loss, recon_loss
from ..transfer import Checkpoint, apply_scenario
from ..unet import (ParamTree, TASK_PREFIXES, build, forward_classification, forward_conrec, forward_embedding,
                    forward_reconstruction, forward_segmentation, task_params)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

RUNLOG_COLUMNS = ("seed", "epoch", "train_loss", "soft_dice", "thr_dice", "seconds")


@dataclass
class RunRecord:
    seed: int
    epoch: int
    train_loss: float
    soft_dice: float
    thr_dice: float
    seconds: float
    val_loss: float = math.nan


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)

    def add(self, rec: RunRecord) -> None:
        prev = [r.epoch for r in self.records if r.seed == rec.seed]
        require(not prev or rec.epoch > prev[-1], f"epochs must increase per seed (got {rec.epoch} after {prev})",
                module="harness", code="runlog")
        self.records.append(rec)

    def for_seed(self, seed: int) -> list[RunRecord]:
        return [r for r in self.records if r.seed == seed]

    def to_csv(self, with_val_loss: bool = False) -> str:
        cols = RUNLOG_COLUMNS + (("val_loss",) if with_val_loss else ())
        lines = [",".join(cols)]
        for r in self.records:
            vals = [str(r.seed), str(r.epoch), f"{r.train_loss:.6f}", f"{r.soft_dice:.6f}", f"{r.thr_dice:.6f}",
                    f"{r.seconds:.3f}"]
            if with_val_loss:
                vals.append(f"{r.val_loss:.6f}")
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "RunLog":
        rows = [line.split(",") for line in text.strip().splitlines()]
        header = rows[0]
        out = cls()
        for row in rows[1:]:
            d = dict(zip(header, row))
            out.records.append(RunRecord(
                seed=int(d["seed"]), epoch=int(d["epoch"]), train_loss=float(d["train_loss"]),
                soft_dice=float(d["soft_dice"]), thr_dice=float(d["thr_dice"]), seconds=float(d["seconds"]),
                val_loss=float(d.get("val_loss", "nan"))))
        return out


# ---------------------------------------------------------------- helpers

def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton is folded into the previous batch (BN needs >= 2)."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _step(params: ParamTree, trainable: ParamTree, loss: T.Tensor, optim: T.AdamState, cfg: ExperimentConfig) -> float:
    value = loss.item()
    if not math.isfinite(value):
        return value  # the epoch-level check aborts with the recent finite history
    T.backward(loss)
    if cfg.optim.name == "sgd":
        T.sgd_step(trainable, optim.lr)
    else:
        T.adam_step(trainable, optim)
    for t in params.values():
        t.grad = None
    return value


def _dtype(params: ParamTree):
    return params["encoder/block0/conv1/weight"].dtype


def predict_segmentation(params: ParamTree, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            x = T.Tensor(np.asarray(images[i:i + batch_size], dtype=_dtype(params)))
            out.append(forward_segmentation(params, x, train=False).data)
    return np.concatenate(out)


def evaluate_segmentation(params: ParamTree, images: np.ndarray, masks: np.ndarray) -> tuple[float, float]:
    pred = predict_segmentation(params, images)
    soft = float(dice_score(pred, masks, threshold=None).mean())
    thr = float(dice_score(pred, masks, threshold=0.5).mean())
    return soft, thr


def _augment_pairs(images: np.ndarray, masks: np.ndarray, aug: AugmentConfig, rng: np.random.Generator):
    xs, ms = [], []
    for img, m in zip(images, masks):
        a, b = random_flip_crop(img, m[0], aug, rng)
        xs.append(a)
        ms.append(b[None])
    return np.stack(xs), np.stack(ms)


def _check_history(history: list[float]) -> None:
    if history and not math.isfinite(history[-1]):
        finite = [h for h in history if math.isfinite(h)][-3:]
        raise ContractViolation(f"non-finite loss; last finite epoch losses {finite}", module="harness",
                                code="nan_loss")


# ---------------------------------------------------------------- pretext objectives

class Objective:
    """Loss of one batch for a pretext task; ``val`` flags deterministic evaluation."""

    def __init__(self, task: str, cfg: ExperimentConfig):
        self.task, self.cfg = task, cfg

    def loss(self, params: ParamTree, images, masks, labels, rng, train: bool) -> T.Tensor:
        cfg, dtype = self.cfg, _dtype(params)
        if self.task == "seg":
            if train:
                images, masks = _augment_pairs(images, masks, cfg.augment, rng)
            pred = forward_segmentation(params, T.Tensor(images.astype(dtype)), train=train)
            return dice_loss(pred, masks.astype(dtype))
        if self.task == "cls":
            logits = forward_classification(params, T.Tensor(images.astype(dtype)), train=train)
            return T.softmax_cross_entropy(logits, labels)
        if self.task == "simclr":
            views = make_views(images, cfg.augment, rng)
            return ntxent_loss(forward_embedding(params, T.Tensor(views.astype(dtype)), train=train),
                               cfg.loss.temperature)
        targets = make_conrec_batch(images, cfg.augment, rng)
        x = T.Tensor(targets.input_view.astype(dtype))
        if self.task == "recon":
            return recon_loss(forward_reconstruction(params, x, train=train), targets.target_b.astype(dtype))
        embed, recon = forward_conrec(params, x, train=train)
        heads = {k: v.astype(dtype) for k, v in targets.heads().items()}
        return conrec_loss(embed, recon, heads, cfg.loss.conrec_weights(), cfg.loss.temperature)


@dataclass
class PretrainResult:
    params: ParamTree
    runlog: RunLog
    best_epoch: int
    optimizer_keys: list[str]
    meta: dict


def pretrain(cfg: ExperimentConfig, samples: list[Sample], seed: int, dtype=np.float32) -> PretrainResult:
    """Train one pretext objective; keep the parameters of the best validation epoch."""
    task = cfg.task
    images, masks, labels = stack(samples)
    if task == "seg":
        require(masks is not None, "seg pretext needs a segmentation dataset", module="harness", code="dataset")
    if task == "cls":
        require(labels is not None, "cls pretext needs a labelled dataset", module="harness", code="dataset")
    train_idx, val_idx = split_indices(len(samples), cfg.val_fraction,
                                       seed if cfg.split_seed is None else cfg.split_seed)
    require(not set(train_idx) & set(val_idx), "train/val overlap", module="harness", code="split")
    require(len(train_idx) >= 2 and len(val_idx) >= 2, "pretext needs >= 2 train and >= 2 validation samples",
            module="harness", code="split")

    params = build(cfg.unet, seed, dtype)
    trainable = task_params(params, task)
    optim = T.AdamState(lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    objective = Objective(task, cfg)
    sel = lambda arr, idx: None if arr is None else arr[idx]  # noqa: E731

    runlog, best, best_loss, best_epoch = RunLog(), None, math.inf, 0
    history: list[float] = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([seed, epoch, 11])
        optim.lr = cfg.optim.lr_at(epoch, cfg.epochs)
        losses = []
        for b in _batches(len(train_idx), cfg.batch_size, rng):
            idx = train_idx[b]
            loss = objective.loss(params, images[idx], sel(masks, idx), sel(labels, idx), rng, train=True)
            losses.append(_step(params, trainable, loss, optim, cfg))
        history.append(float(np.mean(losses)))
        _check_history(history)
        if epoch % cfg.eval_period and epoch != cfg.epochs:
            continue
        val_rng = np.random.default_rng([seed, 12345])
        with T.no_grad():
            vals = []
            for i in range(0, len(val_idx), cfg.batch_size):
                idx = val_idx[i:i + cfg.batch_size]
                if len(idx) < 2:
                    continue
                vals.append(objective.loss(params, images[idx], sel(masks, idx), sel(labels, idx), val_rng,
                                           train=False).item() * len(idx))
        val_loss = float(np.sum(vals) / len(val_idx))
        _check_history(history + [val_loss])
        soft = thr = math.nan
        if masks is not None and task == "seg":
            soft, thr = evaluate_segmentation(params, images[val_idx], masks[val_idx])
        elapsed = time.perf_counter() - start if cfg.log.wallclock else 0.0
        runlog.add(RunRecord(seed, epoch, history[-1], soft, thr, elapsed, val_loss))
        log.info("pretrain %s seed=%d epoch=%d train=%.4f val=%.4f", task, seed, epoch, history[-1], val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best = {k: T.Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in params.items()}

    meta = {"task": task, "seed": seed, "best_epoch": best_epoch, "best_val_loss": best_loss,
            "trained_prefixes": list(TASK_PREFIXES[task]), "optimizer_keys": sorted(optim.m)}
    return PretrainResult(best, runlog, best_epoch, sorted(optim.m), meta)


# ---------------------------------------------------------------- finetuning

def finetune(cfg: ExperimentConfig, samples: list[Sample], seed: int, ckpt: Checkpoint | None,
             scenario: str, dtype=np.float32, runlog: RunLog | None = None) -> RunLog:
    """Dice training on a ``cfg.fraction`` train split, evaluated on the held-out rest."""
    images, masks, _ = stack(samples)
    require(masks is not None, "finetuning needs a segmentation dataset", module="harness", code="dataset")
    if scenario == "random-init" and ckpt is not None:
        warnings.warn("scenario random-init ignores the checkpoint argument", stacklevel=2)
        ckpt = None
    split_seed = seed if cfg.split_seed is None else cfg.split_seed
    train_idx, eval_idx = split_indices(len(samples), cfg.fraction, split_seed)
    require(not set(train_idx.tolist()) & set(eval_idx.tolist()), "train/eval splits intersect",
            module="harness", code="split")
    require(len(train_idx) >= 2, f"train split of {len(train_idx)} sample(s) is too small for batchnorm",
            module="harness", code="split")
    if cfg.eval_max is not None:
        eval_idx = eval_idx[:cfg.eval_max]

    params = apply_scenario(build(cfg.unet, seed, dtype), ckpt, scenario, reinit_seed=seed,
                            reuse_heads=cfg.reuse_heads)
    trainable = task_params(params, "seg")
    optim = T.AdamState(lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    runlog = runlog if runlog is not None else RunLog()
    history: list[float] = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([seed, epoch, 21])
        optim.lr = cfg.optim.lr_at(epoch, cfg.epochs)
        losses = []
        for b in _batches(len(train_idx), cfg.batch_size, rng):
            idx = train_idx[b]
            x, m = _augment_pairs(images[idx], masks[idx], cfg.augment, rng)
            pred = forward_segmentation(params, T.Tensor(x.astype(dtype)), train=True)
            losses.append(_step(params, trainable, dice_loss(pred, m.astype(dtype)), optim, cfg))
        history.append(float(np.mean(losses)))
        _check_history(history)
        if epoch % cfg.eval_period and epoch != cfg.epochs:
            continue
        soft, thr = evaluate_segmentation(params, images[eval_idx], masks[eval_idx])
        elapsed = time.perf_counter() - start if cfg.log.wallclock else 0.0
        runlog.add(RunRecord(seed, epoch, history[-1], soft, thr, elapsed))
        log.info("finetune %s seed=%d epoch=%d loss=%.4f thr_dice=%.4f", scenario, seed, epoch, history[-1], thr)
    return runlog

