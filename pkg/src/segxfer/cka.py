"""Linear centered kernel alignment between encoder representations."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import require
from .unet import ParamTree, forward_encoder


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n probes, p features)
    model_id: str = ""
    probe_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        require(self.values.ndim == 2 and self.values.shape[0] >= 2,
                f"feature matrix needs shape (n >= 2, p), got {self.values.shape}", module="cka", code="shape")
        require(not np.isnan(self.values).any(), f"feature matrix {self.model_id!r} contains NaN",
                module="cka", code="nan")


def extract_features(params: ParamTree, images: np.ndarray, model_id: str = "", probe_id: str = "",
                     batch_size: int = 64) -> FeatureMatrix:
    """Eval-mode bottleneck activations, flattened row-major per probe image."""
    rows = []
    dtype = params["encoder/block0/conv1/weight"].dtype
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            x = T.Tensor(np.asarray(images[start:start + batch_size], dtype=dtype))
            rows.append(forward_encoder(params, x, train=False).bottleneck.data.reshape(len(x.data), -1))
    return FeatureMatrix(np.concatenate(rows), model_id=model_id, probe_id=probe_id)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def linear_cka(x, y) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centred Xc, Yc.

    When features outnumber examples the same quantities are evaluated through
    the n x n Gram matrices. Returns 0 if either side is constant.
    """
    xv, yv = _values(x), _values(y)
    require(xv.ndim == 2 and yv.ndim == 2 and xv.shape[0] == yv.shape[0],
            f"linear_cka: example counts differ ({xv.shape} vs {yv.shape})", module="cka", code="n_mismatch")
    xc = xv - xv.mean(axis=0, keepdims=True)
    yc = yv - yv.mean(axis=0, keepdims=True)
    n = xc.shape[0]
    if max(xc.shape[1], yc.shape[1]) > n:
        kx, ky = xc @ xc.T, yc @ yc.T
        cross = float(np.sum(kx * ky))
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    else:
        # both products, so swapping the arguments gives a bit-identical result
        cross = 0.5 * (float(np.sum((yc.T @ xc) ** 2)) + float(np.sum((xc.T @ yc) ** 2)))
        nx, ny = np.linalg.norm(xc.T @ xc), np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        return 0.0
    return cross / (nx * ny)


def similarity_matrix(features: list) -> np.ndarray:
    require(len(features) >= 2, "similarity_matrix needs at least two models", module="cka", code="too_few")
    k = len(features)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            out[i, j] = out[j, i] = linear_cka(features[i], features[j])
    return out


def write_similarity_csv(path: str | os.PathLike, names: list[str], matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(f"{v:.6f}" for v in row)])
    return path


def read_similarity_csv(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    names = rows[0][1:]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, matrix
