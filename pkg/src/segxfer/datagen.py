"""Seeded synthetic scenes of coloured shapes on value-noise backgrounds.

Three dataset flavours are produced from the same scene generator:

* ``segmentation``: whole scenes with the binary mask of one shape kind; scenes
  without a single target pixel are discarded.
* ``classification``: image_size patches cut from larger scenes; a coin flip
  picks positive (>= 20% target pixels) or negative (no target pixel).
* ``multiclass``: whole scenes labelled by whichever of the listed kinds covers
  the most pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .augment import resize
from .errors import ContractViolation, require

KINDS = ("disk", "triangle", "rectangle", "cross", "ring")
TASKS = ("segmentation", "classification", "multiclass")
POSITIVE_FRACTION = 0.20
CROP_REJECTIONS = 100
RING_INNER = 0.55
BAR_HALF_WIDTH = 0.3
PLACEMENT_TRIES = 20
MIN_SEPARATION = 0.9


@dataclass
class ShapeObject:
    kind: str
    cy: float
    cx: float
    radius: float
    rotation: float
    color: tuple[float, float, float]


@dataclass
class ShapeScene:
    size: int
    background: np.ndarray  # (3, size, size)
    objects: list[ShapeObject] = field(default_factory=list)  # painted in order, later occludes earlier


@dataclass
class DatasetSpec:
    n_samples: int = 200
    image_size: int = 64
    task: str = "segmentation"
    kinds: tuple[str, ...] = ("disk",)
    seed: int = 0
    min_objects: int = 2
    max_objects: int = 3
    radius_range: tuple[float, float] = (0.15, 0.28)
    positive_radius_range: tuple[float, float] = (0.35, 0.45)
    patch_scale: int = 2  # classification scenes are patch_scale x image_size

    def __post_init__(self):
        if isinstance(self.kinds, str):
            self.kinds = tuple(k.strip() for k in self.kinds.split(",") if k.strip())
        self.kinds = tuple(self.kinds)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.positive_radius_range = tuple(float(r) for r in self.positive_radius_range)
        require(self.n_samples >= 1, f"n_samples must be >= 1, got {self.n_samples}", module="datagen", code="spec")
        require(self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}", module="datagen", code="spec")
        unknown = [k for k in self.kinds if k not in KINDS]
        require(not unknown and len(self.kinds) >= 1, f"kinds {unknown or self.kinds} not in vocabulary {KINDS}",
                module="datagen", code="spec")
        if self.task == "multiclass":
            require(len(self.kinds) >= 2, "multiclass needs at least two kinds", module="datagen", code="spec")
        require(1 <= self.min_objects <= self.max_objects, "need 1 <= min_objects <= max_objects",
                module="datagen", code="spec")

    @property
    def scene_size(self) -> int:
        return self.image_size * (self.patch_scale if self.task == "classification" else 1)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32, multiples of 1/255
    mask: np.ndarray | None = None  # (H, W) float32 in {0, 1}
    label: int | None = None
    split: str = "all"


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats onto the 8-bit grid so PPM/PGM round trips are exact."""
    return to_float(np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8))


def to_float(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255)


# ---------------------------------------------------------------- scenes

def _value_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.random((3, cells + 1, cells + 1))
    return resize(coarse, size, size)


def _object_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # vivid: the brightest channel sits well above the dim background
    c = rng.uniform(0.0, 1.0, size=3)
    c = c / c.max() * rng.uniform(0.75, 1.0)
    return tuple(float(v) for v in c)


def _place(rng: np.random.Generator, size: int, radius: float,
           placed: list[ShapeObject]) -> tuple[float, float] | None:
    """Centre keeping the shape inside the scene with limited overlap; None if no spot was found."""
    margin = min(radius, size / 2)
    for _ in range(PLACEMENT_TRIES):
        cy, cx = (float(rng.uniform(margin, size - margin)) for _ in range(2))
        if all(np.hypot(cy - o.cy, cx - o.cx) >= MIN_SEPARATION * (radius + o.radius) for o in placed):
            return cy, cx
    return None


def generate_scene(spec: DatasetSpec, index: int, attempt: int = 0, force_kind: str | None = None) -> ShapeScene:
    """Deterministic in (spec.seed, index, attempt).

    ``force_kind`` makes the first object a large instance of that kind, so a
    positive classification patch exists with high probability.
    """
    rng = np.random.default_rng([spec.seed, index, attempt])
    size = spec.scene_size
    tint = rng.uniform(0.1, 0.5, size=3)
    background = np.clip(0.6 * tint[:, None, None] + 0.3 * _value_noise(rng, size), 0, 1)
    objects: list[ShapeObject] = []
    lo, hi = spec.radius_range
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for i in range(count):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        radius = rng.uniform(lo, hi) * spec.image_size
        if i == 0 and force_kind is not None:
            kind, radius = force_kind, rng.uniform(*spec.positive_radius_range) * spec.image_size
        spot = _place(rng, size, radius, objects)
        rotation, color = float(rng.uniform(0, 2 * np.pi)), _object_color(rng)
        if spot is not None:
            objects.append(ShapeObject(kind=kind, cy=spot[0], cx=spot[1], radius=float(radius),
                                       rotation=rotation, color=color))
    return ShapeScene(size=size, background=background, objects=objects)


def shape_mask(obj: ShapeObject, size: int) -> np.ndarray:
    """Pixels (by centre) covered by one shape, ignoring occlusion."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = ys - obj.cy, xs - obj.cx
    c, s = np.cos(obj.rotation), np.sin(obj.rotation)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = obj.radius
    if obj.kind == "disk":
        return u * u + v * v <= r * r
    if obj.kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (RING_INNER * r) ** 2)
    if obj.kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.6 * r)
    if obj.kind == "cross":
        w = BAR_HALF_WIDTH * r
        return ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    if obj.kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            # edge normal points toward vertex direction + pi; inradius is r / 2
            inside &= -(np.cos(a) * u + np.sin(a) * v) <= r / 2
        return inside
    raise ValueError(f"unknown shape kind {obj.kind!r}")


def render(scene: ShapeScene) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Paint objects in order; returns the quantized image and per-kind ownership masks."""
    size = scene.size
    image = scene.background.copy()
    owner = np.full((size, size), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        covered = shape_mask(obj, size)
        owner[covered] = i
        image[:, covered] = np.asarray(obj.color)[:, None]
    masks = {}
    for kind in KINDS:
        ids = [i for i, o in enumerate(scene.objects) if o.kind == kind]
        masks[kind] = np.isin(owner, ids).astype(np.float32) if ids else np.zeros((size, size), np.float32)
    return quantize(image), masks


# ---------------------------------------------------------------- datasets

def _segmentation(spec: DatasetSpec) -> list[Sample]:
    target = spec.kinds[0]
    out, index = [], 0
    while len(out) < spec.n_samples:
        image, masks = render(generate_scene(spec, index))
        index += 1
        if masks[target].any():
            out.append(Sample(image=image, mask=masks[target]))
    return out


def multiclass_scenes(spec: DatasetSpec) -> list[tuple[Sample, dict[str, np.ndarray]]]:
    """Multiclass samples together with the per-kind masks of their scenes."""
    out, index = [], 0
    while len(out) < spec.n_samples:
        image, masks = render(generate_scene(spec, index))
        index += 1
        areas = np.array([masks[k].sum() for k in spec.kinds])
        if areas.max() > 0:
            out.append((Sample(image=image, label=int(areas.argmax())), masks))
    return out


def _multiclass(spec: DatasetSpec) -> list[Sample]:
    return [s for s, _ in multiclass_scenes(spec)]


def _find_patch(mask: np.ndarray, size: int, positive: bool, rng: np.random.Generator):
    limit = mask.shape[0] - size
    for _ in range(CROP_REJECTIONS):
        top, left = int(rng.integers(0, limit + 1)), int(rng.integers(0, limit + 1))
        frac = mask[top:top + size, left:left + size].mean()
        if (positive and frac >= POSITIVE_FRACTION) or (not positive and frac == 0):
            return top, left
    return None


def classification_sample(spec: DatasetSpec, index: int) -> Sample:
    coin = np.random.default_rng([spec.seed, index, 2 ** 31])
    positive = bool(coin.random() < 0.5)
    target, size = spec.kinds[0], spec.image_size
    attempt = 0
    while True:
        image, masks = render(generate_scene(spec, index, attempt, force_kind=target if positive else None))
        rng = np.random.default_rng([spec.seed, index, attempt, 1])
        box = _find_patch(masks[target], size, positive, rng)
        if box is not None:
            top, left = box
            return Sample(image=image[:, top:top + size, left:left + size].copy(),
                          mask=masks[target][top:top + size, left:left + size].copy(),
                          label=int(positive))
        attempt += 1


def make_dataset(spec: DatasetSpec) -> list[Sample]:
    """Pure function of ``spec``."""
    if spec.task == "segmentation":
        return _segmentation(spec)
    if spec.task == "multiclass":
        return _multiclass(spec)
    return make_classification_dataset(spec)


def make_classification_dataset(spec: DatasetSpec, rng=None) -> list[Sample]:
    # per-sample streams derive from (seed, index); rng is accepted for interface symmetry only
    return [classification_sample(spec, i) for i in range(spec.n_samples)]


def split_fraction(n_total: int, fraction: float) -> tuple[int, int]:
    """Train/eval sizes with the train count rounded half away from zero."""
    require(0 < fraction < 1, f"fraction must be in (0, 1), got {fraction}", module="datagen", code="fraction")
    n_train = int((Decimal(n_total) * Decimal(str(fraction))).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    require(n_train > 0, f"fraction {fraction} of {n_total} samples leaves an empty train split",
            module="datagen", code="empty_split")
    return n_train, n_total - n_train


def split_indices(n_total: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_train, _ = split_fraction(n_total, fraction)
    perm = np.random.default_rng([seed, 7919]).permutation(n_total)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------- PPM / PGM I/O

def _write_pnm(path: Path, magic: bytes, u8: np.ndarray) -> None:
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(u8).tobytes())


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise ContractViolation(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}", module="datagen", code="corrupt")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ContractViolation(f"{path}: malformed header {tokens}", module="datagen", code="corrupt") from None
    channels = 3 if magic == b"P6" else 1
    payload = raw[pos:]
    if maxval != 255 or len(payload) != w * h * channels:
        raise ContractViolation(f"{path}: expected {w * h * channels} payload bytes at maxval 255, "
                                f"got {len(payload)} at maxval {maxval}", module="datagen", code="corrupt")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def save_dataset(samples: list[Sample], directory: str | os.PathLike) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"images/{i:05d}.ppm"
        _write_pnm(root / img_name, b"P6", np.round(np.moveaxis(s.image, 0, -1) * 255).astype(np.uint8))
        mask_name = "-"
        if s.mask is not None:
            mask_name = f"masks/{i:05d}.pgm"
            _write_pnm(root / mask_name, b"P5", (s.mask > 0.5).astype(np.uint8) * 255)
        label = "-" if s.label is None else str(s.label)
        lines.append(f"{img_name} {mask_name} {label} {s.split}\n")
    (root / "manifest.txt").write_text("".join(lines))
    return root


def load_dataset(directory: str | os.PathLike) -> list[Sample]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    require(manifest.exists(), f"{manifest}: no manifest", module="datagen", code="missing")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        parts = line.split()
        if len(parts) != 4:
            raise ContractViolation(f"{manifest}:{lineno}: expected 4 fields, got {len(parts)}",
                                    module="datagen", code="corrupt")
        img_name, mask_name, label, split = parts
        image = np.moveaxis(to_float(_read_pnm(root / img_name, b"P6")), -1, 0).copy()
        mask = None if mask_name == "-" else (_read_pnm(root / mask_name, b"P5") > 127).astype(np.float32)
        samples.append(Sample(image=image, mask=mask, label=None if label == "-" else int(label), split=split))
    return samples


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    images = np.stack([s.image for s in samples])
    masks = None if samples[0].mask is None else np.stack([s.mask for s in samples])[:, None]
    labels = None if samples[0].label is None else np.array([s.label for s in samples])
    return images, masks, labels
