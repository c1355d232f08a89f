"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires grad the result
records its parents and a closure mapping the output gradient to one gradient
per parent. Node ids increase monotonically, so sorting reachable nodes by
descending id is a valid reverse topological order (the tape).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, require

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_grad_enabled = True


def _req(cond: bool, message: str) -> None:
    require(cond, message, module="tensor", code="shape")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.node = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every grad-requiring t reachable from root."""
    require(root.data.size == 1, f"backward root must be scalar, got shape {root.shape}",
            module="tensor", code="nonscalar_root")
    require(root.requires_grad, "backward root is not on the tape", module="tensor", code="detached_root")
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node in seen:
            continue
        seen.add(t.node)
        order.append(t)
        stack.extend(p for p in t.parents if p.requires_grad)
    order.sort(key=lambda t: t.node, reverse=True)

    pending: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for t in order:
        g = pending.pop(t.node, None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t.backward_fn is None:
            continue
        for p, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = pending.get(p.node)
            pending[p.node] = pg if prev is None else prev + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{name}: shapes {a.shape} and {b.shape} do not broadcast",
                                module="tensor", code="shape") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))  # NaN propagates


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions / structure

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul_scalar(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...)), row-major."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    _req(a.data.ndim == 2, f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _req(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
         f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N, in) @ weight (in, out) + bias (out,)."""
    _req(x.data.ndim == 2 and weight.data.ndim == 2 and x.shape[1] == weight.shape[0],
         f"dense: input features {x.shape} do not match weight {weight.shape}")
    if bias is not None:
        _req(bias.shape == (weight.shape[1],), f"dense: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx, gw = g @ weight.data.T, x.data.T @ g
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    _req(len(tensors) > 0, "concat_channels of an empty list")
    ref = tensors[0].shape
    for t in tensors:
        _req(t.data.ndim == len(ref) and t.shape[0] == ref[0] and t.shape[2:] == ref[2:],
             f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    _req(x.data.ndim == 4, f"global_avg_pool expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit-norm rows of a (N, d) matrix."""
    _req(x.data.ndim == 2, f"l2_normalize expects a matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    _req(logits.data.ndim == 2 and labels.shape == (logits.shape[0],),
         f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    _req(bool(np.all((labels >= 0) & (labels < logits.shape[1]))), "label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    n = len(labels)
    loss = -(z[rows, labels] - np.log(ez.sum(axis=1))).mean()

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _req(a.shape == b.shape, f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _result(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), bw)


# ---------------------------------------------------------------- image ops

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW input, OIHW weight; im2col + one matmul each way."""
    _req(x.data.ndim == 4, f"conv2d: input must be NCHW, got {x.shape}")
    _req(weight.data.ndim == 4, f"conv2d: weight must be OIHW, got {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    _req(c == i, f"conv2d: input channels C={c} != weight in-channels I={i}")
    hp, wp = h + 2 * padding, w + 2 * padding
    _req(kh <= hp and kw <= wp, f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None:
        _req(bias.shape == (o,), f"conv2d: bias {bias.shape} vs out-channels {o}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C, kh, kw, N, ho, wo) -> columns
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                    dcols[:, a, b].transpose(1, 0, 2, 3)
        gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; ties go to the first row-major element of the window."""
    _req(x.data.ndim == 4, f"maxpool2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _req(h % 2 == 0 and w % 2 == 0, f"maxpool2 needs even spatial dims, got H={h}, W={w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        z = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return (z.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    _req(x.data.ndim == 4, f"upsample_nearest2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average).
    """
    _req(x.data.ndim == 4, f"batchnorm2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _req(gamma.shape == (c,) and beta.shape == (c,), f"batchnorm2d: gamma/beta must be ({c},)")
    xd = x.data
    if training:
        _req(n >= 2, f"batchnorm2d in train mode needs batch size >= 2, got {n}")
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * (m / (m - 1))
    else:
        m = None
        mu, var = running_mean.data, running_var.data
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * inv_std)[None, :, None, None]
        if training:
            dx = scale * (g - (dbeta / m)[None, :, None, None] - xhat * (dgamma / m)[None, :, None, None])
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _trainable(params: dict[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return ((k, t) for k, t in params.items() if t.requires_grad)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update of every trainable tensor, then zero the grads."""
    items = list(_trainable(params))
    missing = [k for k, t in items if t.grad is None]
    require(not missing, f"adam_step: missing gradient for {missing[:5]}", module="tensor", code="missing_grad")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for k, t in items:
        g = t.grad
        if k not in state.m:
            state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(t.dtype)
        t.grad = None


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    items = list(_trainable(params))
    missing = [k for k, t in items if t.grad is None]
    require(not missing, f"sgd_step: missing gradient for {missing[:5]}", module="tensor", code="missing_grad")
    for _, t in items:
        t.data -= (lr * t.grad).astype(t.dtype)
        t.grad = None


def zero_grad(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None
