"""Flat ``key = value`` experiment configs with dotted keys for nesting.

    # pretrain a disk segmentation model
    task = seg
    data.kinds = disk
    unet.depth = 3
    seeds = 0, 1, 2
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..augment import AugmentConfig
from ..datagen import DatasetSpec
from ..errors import ContractViolation, require
from ..losses import ConRecWeights
from ..unet import UNetConfig

TASKS = ("simclr", "recon", "conrec", "cls", "seg")


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_scalar(p.strip()) for p in text.split(",") if p.strip()]
    return _parse_scalar(text)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"{source}:{lineno}: expected 'key = value', got {raw!r}",
                                    module="harness", code="config")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(value)
    return out


SCHEDULES = ("constant", "cosine")


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # cosine: lr * (1 + cos(pi * (epoch - 1) / epochs)) / 2

    def __post_init__(self):
        require(self.name in ("adam", "sgd"), f"optim.name must be adam or sgd, got {self.name!r}",
                module="harness", code="config")
        require(self.schedule in SCHEDULES, f"optim.schedule must be one of {SCHEDULES}, got {self.schedule!r}",
                module="harness", code="config")

    def lr_at(self, epoch: int, epochs: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / epochs))


@dataclass
class LossConfig:
    temperature: float = 0.5
    lambda_contrastive: float = 1.0
    w_b: float = 1.0
    w_c: float = 1.0
    w_d: float = 1.0
    w_e: float = 1.0

    def conrec_weights(self) -> ConRecWeights:
        return ConRecWeights(self.lambda_contrastive, self.w_b, self.w_c, self.w_d, self.w_e)


@dataclass
class LogConfig:
    wallclock: bool = True


@dataclass
class ExperimentConfig:
    task: str = "seg"
    name: str = ""
    dataset: str | None = None  # datagen directory; generated from ``data`` when absent
    data: DatasetSpec = field(default_factory=DatasetSpec)
    unet: UNetConfig | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    log: LogConfig = field(default_factory=LogConfig)
    epochs: int = 40
    batch_size: int = 16
    eval_period: int = 2
    seeds: list[int] = field(default_factory=lambda: [0])
    scenario: str | None = None
    checkpoint: str | None = None
    reuse_heads: bool = False
    fraction: float = 0.05  # finetune train fraction
    val_fraction: float = 0.7  # pretext train share; the rest selects the best epoch
    split_seed: int | None = None  # None: the run seed picks the split
    eval_max: int | None = None
    models: list[str] = field(default_factory=list)  # cka: name:checkpoint entries
    probe: str | None = None  # cka: probe dataset directory
    runlog_dir: str | None = None  # report input
    out: str = "runs"

    def __post_init__(self):
        require(self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}", module="harness", code="config")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        require(len(self.seeds) > 0, "seeds must be nonempty", module="harness", code="config")
        if isinstance(self.models, str):
            self.models = [self.models]
        if self.unet is None:
            self.unet = UNetConfig(input_size=self.data.image_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DatasetSpec, "unet": UNetConfig, "augment": AugmentConfig, "optim": OptimConfig,
             "loss": LossConfig, "log": LogConfig}


def build_config(values: dict) -> ExperimentConfig:
    top, nested = {}, {k: {} for k in _SECTIONS}
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in values.items():
        section, _, sub = key.partition(".")
        if sub:
            require(section in _SECTIONS, f"unknown config section {section!r} in {key!r}",
                    module="harness", code="config")
            allowed = {f.name for f in dataclasses.fields(_SECTIONS[section])}
            require(sub in allowed, f"unknown key {key!r}; {section} accepts {sorted(allowed)}",
                    module="harness", code="config")
            nested[section][sub] = value
        else:
            require(key in top_fields, f"unknown config key {key!r}", module="harness", code="config")
            top[key] = value
    if "image_size" in nested["data"]:
        nested["unet"].setdefault("input_size", nested["data"]["image_size"])
    try:
        for section, cls in _SECTIONS.items():
            top[section] = cls(**nested[section])
        return ExperimentConfig(**top)
    except TypeError as e:
        raise ContractViolation(f"bad config value: {e}", module="harness", code="config") from None


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    require(path.exists(), f"config file {path} not found", module="harness", code="config")
    values = parse_config_text(path.read_text(), str(path))
    values.update(overrides or {})
    return build_config(values)
