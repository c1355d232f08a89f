"""Training objectives and the numpy-side dice metrics used for reporting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import require
from .tensor import Tensor

TRAIN_DICE_EPS = 1.0
METRIC_DICE_EPS = 1e-6
DEFAULT_TEMPERATURE = 0.5


@dataclass
class ConRecWeights:
    lambda_contrastive: float = 1.0
    w_b: float = 1.0
    w_c: float = 1.0
    w_d: float = 1.0
    w_e: float = 1.0

    def __post_init__(self):
        values = [self.lambda_contrastive, *self.head_weights().values()]
        require(all(v >= 0 for v in values), f"ConRec weights must be nonnegative, got {values}",
                module="losses", code="weights")
        require(any(v > 0 for v in values), "at least one ConRec weight must be positive",
                module="losses", code="weights")

    def head_weights(self) -> dict[str, float]:
        return {"b": self.w_b, "c": self.w_c, "d": self.w_d, "e": self.w_e}


def dice_loss(pred: Tensor, target, eps: float = TRAIN_DICE_EPS) -> Tensor:
    """Soft dice loss computed per sample (all non-batch axes) and averaged over the batch."""
    target = T.as_tensor(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype))
    require(pred.shape == target.shape, f"dice_loss: pred {pred.shape} vs target {target.shape}",
            module="losses", code="shape")
    require(bool(np.all((target.data == 0) | (target.data == 1))), "dice_loss: target must be binary",
            module="losses", code="target")
    axes = tuple(range(1, pred.data.ndim))
    inter = T.sum(pred * target, axis=axes)
    denom = T.add_scalar(T.sum(pred, axis=axes) + T.sum(target, axis=axes), eps)
    score = T.add_scalar(T.mul_scalar(inter, 2.0), eps) / denom
    return T.add_scalar(T.mul_scalar(T.mean(score), -1.0), 1.0)


def dice_score(pred: np.ndarray, target: np.ndarray, threshold: float | None = 0.5,
               eps: float = METRIC_DICE_EPS) -> np.ndarray:
    """Per-sample dice coefficient; ``threshold=None`` gives the soft score."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if threshold is not None:
        pred = (pred >= threshold).astype(np.float64)
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    return (2.0 * inter + eps) / (pred.sum(axis=axes) + target.sum(axis=axes) + eps)


def ntxent_loss(embeds: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """NT-Xent over 2N unit rows where rows 2k and 2k+1 are views of sample k."""
    n2 = embeds.shape[0]
    require(embeds.data.ndim == 2 and n2 >= 2 and n2 % 2 == 0,
            f"ntxent_loss expects (2N, d) embeddings, got {embeds.shape}", module="losses", code="shape")
    norms = np.linalg.norm(embeds.data, axis=1)
    require(bool(np.all(np.abs(norms - 1.0) <= 1e-3)),
            f"ntxent_loss: rows must be L2-normalized, norms range [{norms.min():.4g}, {norms.max():.4g}]",
            module="losses", code="not_normalized")
    sim = T.mul_scalar(T.matmul(embeds, T.transpose(embeds)), 1.0 / temperature)
    # exp(-1e9) underflows to exactly 0, removing the self-pair from the denominator
    self_mask = np.zeros((n2, n2), dtype=embeds.dtype)
    np.fill_diagonal(self_mask, -1e9)
    positives = np.arange(n2) ^ 1
    return T.softmax_cross_entropy(sim + self_mask, positives)


def recon_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    return T.mse(pred, target)


def conrec_loss(embeds: Tensor, recon_preds: Mapping[str, Tensor], targets: Mapping[str, np.ndarray],
                weights: ConRecWeights | None = None, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """lambda * NT-Xent + sum over heads of w_h * MSE(pred_h, target_h).

    Terms with zero weight are skipped entirely.
    """
    weights = weights or ConRecWeights()
    total = None
    if weights.lambda_contrastive > 0:
        total = T.mul_scalar(ntxent_loss(embeds, temperature), weights.lambda_contrastive)
    for head, w in weights.head_weights().items():
        if w <= 0:
            continue
        term = T.mul_scalar(recon_loss(recon_preds[head], targets[head]), w)
        total = term if total is None else total + term
    return total
