"""U-Net encoder/decoder with segmentation, classification, projection and
four reconstruction heads.

Parameters live in a flat, lexicographically ordered ``dict[str, Tensor]``
(the ParamTree). Top-level prefixes partition the tree for weight transfer:
``encoder/``, ``decoder/`` and ``heads/<name>/``.

In the ConRec forward pass the first ``depth - 1`` decoder blocks are shared by
all four reconstruction tasks. Head b uses ``decoder/``'s own last block, heads
c, d and e each own a private copy of that block under ``heads/recon_<h>/block``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import require
from .tensor import Tensor

ParamTree = dict[str, Tensor]

RECON_HEADS = ("b", "c", "d", "e")
RECON_CHANNELS = {"b": 3, "c": 3, "d": 1, "e": 3}
BUFFER_SUFFIXES = ("running_mean", "running_var")


@dataclass
class UNetConfig:
    in_channels: int = 3
    depth: int = 3
    base_channels: int = 16
    num_classes: int = 2
    embed_dim: int = 64
    input_size: int = 64

    def __post_init__(self):
        require(self.depth >= 2, f"depth must be >= 2, got {self.depth}", module="unet", code="config")
        require(self.base_channels >= 4, f"base_channels must be >= 4, got {self.base_channels}",
                module="unet", code="config")
        require(self.input_size % (2 ** self.depth) == 0,
                f"input_size {self.input_size} not divisible by 2^depth = {2 ** self.depth}",
                module="unet", code="config")
        require(self.num_classes >= 2 and self.embed_dim >= 1 and self.in_channels >= 1,
                "num_classes >= 2, embed_dim >= 1 and in_channels >= 1 required", module="unet", code="config")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.width(self.depth - 1)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.depth


@dataclass
class EncoderOutput:
    bottleneck: Tensor
    skips: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------- parameter layout

def _conv_block_shapes(prefix: str, cin: int, cout: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for k, ci in ((1, cin), (2, cout)):
        shapes[f"{prefix}/conv{k}/weight"] = (cout, ci, 3, 3)
        for s in ("gamma", "beta", *BUFFER_SUFFIXES):
            shapes[f"{prefix}/bn{k}/{s}"] = (cout,)
    return shapes


def decoder_block_io(config: UNetConfig, j: int) -> tuple[int, int, int]:
    """(channels from below, skip channels, output channels) of decoder block j (0 = deepest)."""
    level = config.depth - 1 - j
    below = config.bottleneck_channels if j == 0 else config.width(level + 1)
    return below, config.width(level), config.width(level)


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = config.in_channels
    for i in range(config.depth):
        shapes.update(_conv_block_shapes(f"encoder/block{i}", cin, config.width(i)))
        cin = config.width(i)
    for j in range(config.depth):
        below, skip, out = decoder_block_io(config, j)
        shapes.update(_conv_block_shapes(f"decoder/block{j}", below + skip, out))

    base, cb = config.base_channels, config.bottleneck_channels
    shapes["heads/seg/weight"] = (1, base, 1, 1)
    shapes["heads/seg/bias"] = (1,)
    shapes["heads/cls/weight"] = (cb, config.num_classes)
    shapes["heads/cls/bias"] = (config.num_classes,)
    shapes["heads/proj/fc1/weight"] = (cb, cb)
    shapes["heads/proj/fc1/bias"] = (cb,)
    shapes["heads/proj/fc2/weight"] = (cb, config.embed_dim)
    shapes["heads/proj/fc2/bias"] = (config.embed_dim,)
    below, skip, out = decoder_block_io(config, config.depth - 1)
    for h in RECON_HEADS:
        if h != "b":
            shapes.update(_conv_block_shapes(f"heads/recon_{h}/block", below + skip, out))
        shapes[f"heads/recon_{h}/out/weight"] = (RECON_CHANNELS[h], base, 1, 1)
        shapes[f"heads/recon_{h}/out/bias"] = (RECON_CHANNELS[h],)
    return dict(sorted(shapes.items()))


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_tensor(name: str, shape: tuple[int, ...], seed: int, dtype=np.float32) -> Tensor:
    """He-normal weights, zero biases/betas/means, unit gammas/variances.

    Each tensor draws from its own stream keyed by (seed, name), so any subtree
    can be re-initialized independently and reproducibly.
    """
    leaf = name.rsplit("/", 1)[-1]
    if leaf == "weight":
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        data = _name_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)
    elif leaf in ("gamma", "running_var"):
        data = np.ones(shape)
    else:
        data = np.zeros(shape)
    return Tensor(data.astype(dtype), requires_grad=not is_buffer(name))


def build(config: UNetConfig, seed: int, dtype=np.float32) -> ParamTree:
    return {name: init_tensor(name, shape, seed, dtype) for name, shape in param_shapes(config).items()}


def param_count(params: ParamTree, include_buffers: bool = False) -> int:
    """Number of trainable scalars; BN running statistics only when asked."""
    return int(np.sum([t.size for k, t in params.items() if include_buffers or not is_buffer(k)], dtype=np.int64))


def subtree(params: ParamTree, prefix: str) -> ParamTree:
    return {k: t for k, t in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- forward passes

def _cbr(params: ParamTree, prefix: str, k: int, h: Tensor, train: bool) -> Tensor:
    h = T.conv2d(h, params[f"{prefix}/conv{k}/weight"], None, stride=1, padding=1)
    h = T.batchnorm2d(h, params[f"{prefix}/bn{k}/gamma"], params[f"{prefix}/bn{k}/beta"],
                      params[f"{prefix}/bn{k}/running_mean"], params[f"{prefix}/bn{k}/running_var"],
                      training=train)
    return T.relu(h)


def _conv_block(params: ParamTree, prefix: str, h: Tensor, train: bool) -> Tensor:
    return _cbr(params, prefix, 2, _cbr(params, prefix, 1, h, train), train)


def _up_block(params: ParamTree, prefix: str, h: Tensor, skip: Tensor, train: bool) -> Tensor:
    return _conv_block(params, prefix, T.concat_channels([T.upsample_nearest2(h), skip]), train)


def _infer_config_shape(params: ParamTree) -> tuple[int, int]:
    depth = len({k.split("/")[1] for k in params if k.startswith("encoder/")})
    in_ch = params["encoder/block0/conv1/weight"].shape[1]
    return depth, in_ch


def forward_encoder(params: ParamTree, x: Tensor, train: bool = False) -> EncoderOutput:
    depth, in_ch = _infer_config_shape(params)
    require(x.data.ndim == 4 and x.shape[1] == in_ch,
            f"encoder input must be (N, {in_ch}, H, W), got {x.shape}", module="unet", code="input")
    require(x.shape[2] == x.shape[3] and x.shape[2] % 2 ** depth == 0,
            f"encoder input spatial size {x.shape[2:]} must be square and divisible by {2 ** depth}",
            module="unet", code="input")
    skips = []
    h = x
    for i in range(depth):
        h = _conv_block(params, f"encoder/block{i}", h, train)
        skips.append(h)
        h = T.maxpool2(h)
    return EncoderOutput(bottleneck=h, skips=skips)


def _decode(params: ParamTree, enc: EncoderOutput, train: bool, last_prefix: str | None = None) -> Tensor:
    depth = len(enc.skips)
    h = enc.bottleneck
    for j in range(depth):
        prefix = f"decoder/block{j}"
        if j == depth - 1 and last_prefix is not None:
            prefix = last_prefix
        h = _up_block(params, prefix, h, enc.skips[depth - 1 - j], train)
    return h


def _check_size(x: Tensor, expected: int | None) -> None:
    if expected is not None:
        require(x.shape[2] == expected and x.shape[3] == expected,
                f"input spatial size {x.shape[2:]} != configured input_size {expected}",
                module="unet", code="input")


def forward_segmentation(params: ParamTree, x: Tensor, train: bool = False, input_size: int | None = None) -> Tensor:
    _check_size(x, input_size)
    h = _decode(params, forward_encoder(params, x, train), train)
    return T.sigmoid(T.conv2d(h, params["heads/seg/weight"], params["heads/seg/bias"]))


def forward_classification(params: ParamTree, x: Tensor, train: bool = False, input_size: int | None = None) -> Tensor:
    _check_size(x, input_size)
    pooled = T.global_avg_pool(forward_encoder(params, x, train).bottleneck)
    return T.dense(pooled, params["heads/cls/weight"], params["heads/cls/bias"])


def project(params: ParamTree, bottleneck: Tensor) -> Tensor:
    h = T.global_avg_pool(bottleneck)
    h = T.relu(T.dense(h, params["heads/proj/fc1/weight"], params["heads/proj/fc1/bias"]))
    h = T.dense(h, params["heads/proj/fc2/weight"], params["heads/proj/fc2/bias"])
    return T.l2_normalize(h)


def forward_embedding(params: ParamTree, x: Tensor, train: bool = False, input_size: int | None = None) -> Tensor:
    _check_size(x, input_size)
    return project(params, forward_encoder(params, x, train).bottleneck)


def _recon_out(params: ParamTree, head: str, h: Tensor) -> Tensor:
    return T.sigmoid(T.conv2d(h, params[f"heads/recon_{head}/out/weight"], params[f"heads/recon_{head}/out/bias"]))


def forward_reconstruction(params: ParamTree, x: Tensor, train: bool = False, input_size: int | None = None) -> Tensor:
    """Single-task inpainting: full decoder + head b's output conv."""
    _check_size(x, input_size)
    return _recon_out(params, "b", _decode(params, forward_encoder(params, x, train), train))


def forward_conrec(params: ParamTree, x: Tensor, train: bool = False,
                   input_size: int | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    _check_size(x, input_size)
    enc = forward_encoder(params, x, train)
    depth = len(enc.skips)
    h = enc.bottleneck
    for j in range(depth - 1):
        h = _up_block(params, f"decoder/block{j}", h, enc.skips[depth - 1 - j], train)
    recon = {}
    for head in RECON_HEADS:
        prefix = f"decoder/block{depth - 1}" if head == "b" else f"heads/recon_{head}/block"
        recon[head] = _recon_out(params, head, _up_block(params, prefix, h, enc.skips[0], train))
    return project(params, enc.bottleneck), recon


# prefixes each pretext objective actually optimizes
TASK_PREFIXES = {
    "seg": ("encoder/", "decoder/", "heads/seg/"),
    "cls": ("encoder/", "heads/cls/"),
    "simclr": ("encoder/", "heads/proj/"),
    "recon": ("encoder/", "decoder/", "heads/recon_b/"),
    "conrec": ("encoder/", "decoder/", "heads/proj/", "heads/recon_"),
}


def task_params(params: ParamTree, task: str) -> ParamTree:
    prefixes = TASK_PREFIXES[task]
    return {k: t for k, t in params.items() if k.startswith(prefixes)}
