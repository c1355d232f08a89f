"""Checkpoint files and the four weight-transfer scenarios.

File layout (all integers little-endian)::

    b"SXL1" | u32 header_len | header (UTF-8 JSON) | float32 payloads | u32 CRC-32

The header holds ``version``, ``config``, ``meta`` and a ``tensors`` directory of
``{name, shape, offset}`` entries; offsets are byte offsets into the payload.
The CRC covers every byte before it.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, require
from .tensor import Tensor
from .unet import ParamTree, init_tensor, is_buffer

MAGIC = b"SXL1"
FORMAT_VERSION = 1

SCENARIOS = ("random-init", "cls-enc", "seg-enc-dec", "seg-enc")
SCENARIO_PREFIXES = {
    "random-init": (),
    "cls-enc": ("encoder/",),
    "seg-enc-dec": ("encoder/", "decoder/"),
    "seg-enc": ("encoder/",),
}
# which pretext checkpoints each scenario accepts (when the checkpoint records its task)
SCENARIO_TASKS = {
    "cls-enc": ("cls", "simclr", "multiclass"),
    "seg-enc-dec": ("seg", "recon", "conrec"),
    "seg-enc": ("seg", "recon", "conrec"),
}


class ChecksumError(ContractViolation):
    def __init__(self, message: str):
        super().__init__(message, module="transfer", code="checksum")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_params(self) -> ParamTree:
        return {k: Tensor(v.copy(), requires_grad=not is_buffer(k)) for k, v in sorted(self.tensors.items())}


def encode_checkpoint(params: ParamTree | dict[str, np.ndarray], config: dict | None = None,
                      meta: dict | None = None) -> bytes:
    directory, payload, offset = [], [], 0
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": FORMAT_VERSION, "config": config or {}, "meta": meta or {},
                         "tensors": directory}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ContractViolation(f"{source}: not a checkpoint (bad magic)", module="transfer", code="magic")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: CRC-32 mismatch (stored {crc:08x}, computed {zlib.crc32(body):08x})")
    (hlen,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8:8 + hlen].decode("utf-8"))
    payload = body[8 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=start).reshape(shape) \
            .astype(np.float32)
    return Checkpoint(tensors=tensors, config=header["config"], meta=header["meta"], version=header["version"])


def save_checkpoint(params: ParamTree, path: str | os.PathLike, config: dict | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, config, meta))
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    require(path.exists(), f"{path}: checkpoint not found", module="transfer", code="missing")
    return decode_checkpoint(path.read_bytes(), str(path))


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    return encode_checkpoint(ckpt.tensors, ckpt.config, ckpt.meta)


# ---------------------------------------------------------------- scenarios

def reinitialize(params: ParamTree, prefixes: tuple[str, ...], seed: int) -> ParamTree:
    """Fresh He/BN-default values for every name under ``prefixes``; others are shared."""
    out = {}
    for name, t in params.items():
        out[name] = init_tensor(name, t.shape, seed, t.dtype) if name.startswith(prefixes) else t
    return out


def loaded_prefixes(scenario: str, reuse_heads: bool = False) -> tuple[str, ...]:
    require(scenario in SCENARIOS, f"unknown scenario {scenario!r}; expected one of {SCENARIOS}",
            module="transfer", code="scenario")
    prefixes = SCENARIO_PREFIXES[scenario]
    if reuse_heads and scenario == "seg-enc-dec":
        prefixes = prefixes + ("heads/seg/",)
    return prefixes


def apply_scenario(model: ParamTree, ckpt: Checkpoint | None, scenario: str, reinit_seed: int,
                   reuse_heads: bool = False) -> ParamTree:
    """New tree: scenario prefixes copied from ``ckpt``, everything else re-initialized.

    Downstream heads are re-initialized unless ``reuse_heads`` (segmentation head,
    seg-enc-dec only). BN running statistics travel with their subtree.
    """
    prefixes = loaded_prefixes(scenario, reuse_heads)
    if prefixes:
        require(ckpt is not None, f"scenario {scenario} needs a checkpoint", module="transfer", code="missing")
        task = ckpt.meta.get("task")
        allowed = SCENARIO_TASKS.get(scenario, ())
        require(task is None or task in allowed,
                f"scenario {scenario} expects a checkpoint pretrained on one of {allowed}, got {task!r}",
                module="transfer", code="scenario_mismatch")
        for prefix in prefixes:
            require(any(k.startswith(prefix) for k in ckpt.tensors),
                    f"checkpoint has no '{prefix}' subtree required by scenario {scenario}",
                    module="transfer", code="missing_subtree")
        bad = []
        for name, t in model.items():
            if not name.startswith(prefixes):
                continue
            if name not in ckpt.tensors:
                bad.append(f"{name} (missing)")
            elif tuple(ckpt.tensors[name].shape) != tuple(t.shape):
                bad.append(f"{name} {tuple(ckpt.tensors[name].shape)} != {tuple(t.shape)}")
        extra = [k for k in ckpt.tensors if k.startswith(prefixes) and k not in model]
        bad.extend(f"{k} (not in model)" for k in extra)
        require(not bad, "shape mismatch between checkpoint and model: " + ", ".join(bad),
                module="transfer", code="shape_mismatch")

    out = {}
    for name, t in model.items():
        if prefixes and name.startswith(prefixes):
            out[name] = Tensor(ckpt.tensors[name].astype(t.dtype), requires_grad=t.requires_grad)
        else:
            out[name] = init_tensor(name, t.shape, reinit_seed, t.dtype)
    return dict(sorted(out.items()))
