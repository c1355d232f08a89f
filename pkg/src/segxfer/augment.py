"""Geometric/photometric augmentation and ConRec view + target construction.

Images are float arrays shaped (C, H, W) with values in [0, 1]; masks are
(H, W) or (1, H, W) binary arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import map_coordinates

from .errors import require

CROP_TRIES = 10
MASK_PLACEMENT_TRIES = 50


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_min_area: float = 0.5
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.0
    mask_count: int = 4
    mask_area_fraction: float = 0.25
    target_b_jittered: bool = True
    seed: int = 0

    def __post_init__(self):
        self.aspect_range = tuple(float(a) for a in self.aspect_range)
        require(0 < self.crop_min_area <= 1, f"crop_min_area must be in (0, 1], got {self.crop_min_area}",
                module="augment", code="config")
        lo, hi = self.aspect_range
        require(lo <= 1 <= hi, f"aspect_range must contain 1, got {self.aspect_range}",
                module="augment", code="config")
        require(0 <= self.mask_area_fraction < 1,
                f"mask_area_fraction must be in [0, 1), got {self.mask_area_fraction}",
                module="augment", code="config")
        require(self.mask_count >= 0, "mask_count must be >= 0", module="augment", code="config")

    def without_jitter_or_masks(self) -> "AugmentConfig":
        return AugmentConfig(flip_prob=self.flip_prob, crop_min_area=self.crop_min_area,
                             aspect_range=self.aspect_range, brightness=0.0, contrast=0.0,
                             saturation=0.0, hue=0.0, mask_count=0, mask_area_fraction=0.0,
                             target_b_jittered=self.target_b_jittered, seed=self.seed)


@dataclass
class Geometry:
    flip: bool
    top: int
    left: int
    height: int
    width: int


@dataclass
class ReconTargets:
    """Batched (views first) ConRec targets; d is (N, 1, H, W), the rest (N, 3, H, W)."""
    input_view: np.ndarray
    target_b: np.ndarray
    target_c: np.ndarray
    target_d: np.ndarray
    target_e: np.ndarray

    def heads(self) -> dict[str, np.ndarray]:
        return {"b": self.target_b, "c": self.target_c, "d": self.target_d, "e": self.target_e}


# ---------------------------------------------------------------- resizing

def _as_chw(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


def resize(arr: np.ndarray, out_h: int, out_w: int, nearest: bool = False) -> np.ndarray:
    """Resize (C, H, W) or (H, W) with half-pixel-centre sampling; bilinear unless ``nearest``."""
    chw, squeeze = _as_chw(arr)
    c, h, w = chw.shape
    if (h, w) == (out_h, out_w):
        out = chw.copy()
    else:
        ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
        if nearest:
            yi = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
            xi = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
            out = chw[:, yi][:, :, xi]
        else:
            gy, gx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
            out = np.stack([map_coordinates(ch.astype(np.float64), [gy, gx], order=1, mode="nearest")
                            for ch in chw]).astype(chw.dtype)
    return out[0] if squeeze else out


def resize_with_pad(image: np.ndarray, target_size: int, is_mask: bool = False) -> np.ndarray:
    """Aspect-preserving resize so the longer side is ``target_size``, centred on a zero square."""
    chw, squeeze = _as_chw(image)
    c, h, w = chw.shape
    require(h > 0 and w > 0, f"resize_with_pad: zero-area image {chw.shape}", module="augment", code="empty")
    if h == w == target_size:
        return np.array(image, copy=True)
    scale = target_size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    body = resize(chw, nh, nw, nearest=is_mask)
    if is_mask:
        body = (body > 0.5).astype(chw.dtype)
    out = np.zeros((c, target_size, target_size), dtype=chw.dtype)
    top, left = (target_size - nh) // 2, (target_size - nw) // 2
    out[:, top:top + nh, left:left + nw] = body
    return out[0] if squeeze else out


# ---------------------------------------------------------------- flip + crop

def sample_geometry(h: int, w: int, config: AugmentConfig, rng: np.random.Generator) -> Geometry:
    """Rejection-sample a crop box honouring the area and relative-aspect bounds."""
    flip = bool(rng.random() < config.flip_prob)
    lo, hi = config.aspect_range
    full = h * w
    for _ in range(CROP_TRIES):
        area = rng.uniform(config.crop_min_area, 1.0) * full
        aspect = np.exp(rng.uniform(np.log(lo), np.log(hi))) * (w / h)
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(np.sqrt(area / aspect)))
        if not (0 < cw <= w and 0 < ch <= h):
            continue
        rel = (cw / ch) / (w / h)
        if cw * ch < config.crop_min_area * full or not lo <= rel <= hi:
            continue
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        return Geometry(flip, top, left, ch, cw)
    return Geometry(flip, 0, 0, h, w)


def apply_geometry(arr: np.ndarray, geom: Geometry, nearest: bool = False) -> np.ndarray:
    chw, squeeze = _as_chw(arr)
    h, w = chw.shape[1:]
    if geom.flip:
        chw = chw[:, :, ::-1]
    crop = chw[:, geom.top:geom.top + geom.height, geom.left:geom.left + geom.width]
    out = resize(np.ascontiguousarray(crop), h, w, nearest=nearest)
    if nearest:
        out = (out > 0.5).astype(chw.dtype)
    return out[0] if squeeze else out


def random_flip_crop(image: np.ndarray, mask: np.ndarray | None, config: AugmentConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    h, w = np.asarray(image).shape[-2:]
    geom = sample_geometry(h, w, config, rng)
    out_mask = None if mask is None else apply_geometry(mask, geom, nearest=True)
    return apply_geometry(image, geom), out_mask


# ---------------------------------------------------------------- colour jitter

def _grayscale(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def apply_jitter(image: np.ndarray, record: dict) -> np.ndarray:
    """Replay a jitter record: ``record['order']`` lists (op, factor) pairs."""
    out = np.asarray(image, dtype=np.float64)
    for op, factor in record["order"]:
        if op == "brightness":
            out = out * factor
        elif op == "contrast":
            m = _grayscale(out).mean()
            out = (out - m) * factor + m
        elif op == "saturation":
            g = _grayscale(out)[None]
            out = g + factor * (out - g)
        elif op == "hue":
            hsv = rgb_to_hsv(np.moveaxis(np.clip(out, 0, 1), 0, -1))
            hsv[..., 0] = (hsv[..., 0] + factor) % 1.0
            out = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
        else:
            raise ValueError(f"unknown jitter op {op!r}")
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.asarray(image).dtype)


def color_jitter(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    image = np.asarray(image)
    require(image.ndim == 3 and image.shape[0] == 3, f"color_jitter needs an RGB (3, H, W) image, got {image.shape}",
            module="augment", code="not_rgb")
    ops = []
    for op, s in (("brightness", config.brightness), ("contrast", config.contrast),
                  ("saturation", config.saturation)):
        if s > 0:
            ops.append((op, float(rng.uniform(max(0.0, 1 - s), 1 + s))))
    if config.hue > 0:
        ops.append(("hue", float(rng.uniform(-config.hue, config.hue))))
    order = [ops[i] for i in rng.permutation(len(ops))]
    record = {"order": order}
    if not order:
        return image.copy(), record
    return apply_jitter(image, record), record


# ---------------------------------------------------------------- masking

def apply_masks(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero out ``mask_count`` non-overlapping rectangles covering ~``mask_area_fraction``."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    mask_map = np.zeros((h, w), dtype=image.dtype)
    if config.mask_count == 0 or config.mask_area_fraction == 0:
        return image.copy(), mask_map
    per_rect = config.mask_area_fraction * h * w / config.mask_count
    for _ in range(config.mask_count):
        for _ in range(MASK_PLACEMENT_TRIES):
            aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            rw = int(np.clip(round(np.sqrt(per_rect * aspect)), 1, w))
            rh = int(np.clip(round(per_rect / rw), 1, h))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            if not mask_map[top:top + rh, left:left + rw].any():
                break
        mask_map[top:top + rh, left:left + rw] = 1
    return image * (1 - mask_map), mask_map


# ---------------------------------------------------------------- ConRec batches

def _view(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    geo = apply_geometry(image, sample_geometry(image.shape[1], image.shape[2], config, rng))
    jittered, _ = color_jitter(geo, config, rng)
    masked, mask_map = apply_masks(jittered, config, rng)
    target_b = jittered if config.target_b_jittered else geo
    return masked, target_b, geo, mask_map, target_b * (1 - mask_map)


def make_conrec_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> ReconTargets:
    """Two views per image, interleaved so rows 2k and 2k+1 come from image k.

    Each view gets its own generator drawn from ``rng``: flip/crop, then jitter,
    then masks, with targets snapshotted between stages.
    """
    images = np.asarray(images)
    require(images.ndim == 4 and len(images) > 0, f"make_conrec_batch needs (N, 3, H, W), got {images.shape}",
            module="augment", code="empty")
    parts: list[list[np.ndarray]] = [[], [], [], [], []]
    for img in images:
        for _ in range(2):
            view_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
            for acc, arr in zip(parts, _view(img, config, view_rng)):
                acc.append(arr)
    masked, b, c, d, e = (np.stack(p) for p in parts)
    return ReconTargets(input_view=masked, target_b=b, target_c=c, target_d=d[:, None], target_e=e)


def make_views(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Contrastive-only views (flip/crop + jitter, no masks), interleaved like make_conrec_batch."""
    no_masks = AugmentConfig(**{**config.__dict__, "mask_count": 0, "mask_area_fraction": 0.0})
    return make_conrec_batch(images, no_masks, rng).input_view
