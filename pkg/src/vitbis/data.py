"""Synthetic segmentation data and training-time augmentation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .errors import CropTooLarge, InvalidSpec


def default_intensities(num_classes: int) -> list[tuple[float, float]]:
    """Background dark, foreground classes evenly spread over the upper range."""
    out = [(0.0, 0.15)]
    for j in range(1, num_classes):
        c = 0.35 + 0.55 * j / (num_classes - 1)
        out.append((c - 0.05, c + 0.05))
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    num_classes: int = 2
    num_images: int = 8
    shapes_per_image: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (0.12, 0.3)
    intensities: tuple[tuple[float, float], ...] | None = None
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidSpec("num_classes must be >= 2")
        if self.image_size < 4 or self.num_images < 1:
            raise InvalidSpec("image_size must be >= 4 and num_images >= 1")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise InvalidSpec("shapes_per_image must be an ordered non-negative range")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi <= 0.5:
            raise InvalidSpec("radius_range must lie in (0, 0.5]")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.intensities is not None and len(self.intensities) != self.num_classes:
            raise InvalidSpec("need one intensity range per class (background first)")

    def class_intensities(self) -> list[tuple[float, float]]:
        if self.intensities is None:
            return default_intensities(self.num_classes)
        return [tuple(r) for r in self.intensities]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown data spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("shapes_per_image", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("intensities") is not None:
            d["intensities"] = tuple(tuple(r) for r in d["intensities"])
        return cls(**d)


class Shape(NamedTuple):
    """``kind`` is "ellipse" (center, radii) or "rect" (top, left, bottom, right; half-open)."""

    kind: str
    label: int
    params: tuple[float, float, float, float]


def sample_shapes(spec: SyntheticSpec, index: int) -> tuple[list[Shape], list[float]]:
    """Geometry and per-class intensities of image ``index``.

    Returns the shape list (painted in order, later shapes on top) and one
    intensity per class, background first.
    """
    rng = rngmod.stream(spec.seed, "data", index)
    s = spec.image_size
    intensities = [float(rng.uniform(lo, hi)) for lo, hi in spec.class_intensities()]
    count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    shapes = []
    for _ in range(count):
        label = int(rng.integers(1, spec.num_classes))
        ry, rx = rng.uniform(spec.radius_range[0] * s, spec.radius_range[1] * s, size=2)
        cy, cx = rng.uniform(ry, s - ry), rng.uniform(rx, s - rx)
        if rng.random() < 0.5:
            shapes.append(Shape("ellipse", label, (float(cy), float(cx), float(ry), float(rx))))
        else:
            top, left = int(np.floor(cy - ry)), int(np.floor(cx - rx))
            shapes.append(Shape("rect", label, (top, left, int(np.ceil(cy + ry)), int(np.ceil(cx + rx)))))
    return shapes, intensities


def rasterize(shapes: list[Shape], size: int) -> np.ndarray:
    """Paint shapes onto a background-zero label map, sampling pixel centers
    at integer coordinates."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)
    for shape in shapes:
        if shape.kind == "ellipse":
            cy, cx, ry, rx = shape.params
            inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        else:
            top, left, bottom, right = shape.params
            inside = (rows >= top) & (rows < bottom) & (cols >= left) & (cols < right)
        mask[inside] = shape.label
    return mask


def generate_dataset(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Images ``[n, 1, S, S]`` (float64) and label masks ``[n, S, S]`` (uint8).

    Every image draws from its own stream derived from ``(seed, index)``, so
    the result does not depend on generation order.
    """
    n, s = spec.num_images, spec.image_size
    images = np.empty((n, 1, s, s))
    masks = np.empty((n, s, s), dtype=np.uint8)
    for i in range(n):
        shapes, intensities = sample_shapes(spec, i)
        mask = rasterize(shapes, s)
        img = np.asarray(intensities)[mask]
        if spec.noise_sigma > 0:
            noise_rng = rngmod.stream(spec.seed, "data", i, 1)
            img = img + spec.noise_sigma * noise_rng.standard_normal((s, s))
        images[i, 0] = img
        masks[i] = mask
    return images, masks


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 32
    flip_prob: float = 0.5
    intensity_shift_range: tuple[float, float] = (-0.05, 0.05)
    intensity_scale_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.crop_size < 1 or not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidSpec("crop_size must be positive and flip_prob in [0, 1]")


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    flip_v: bool
    flip_h: bool
    scale: float
    shift: float
    crop_size: int = field(default=0)


def draw_augment_params(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    h, w = shape
    c = cfg.crop_size
    if c > h or c > w:
        raise CropTooLarge(f"crop {c} does not fit in {h}x{w}")
    top = int(rng.integers(0, h - c + 1))
    left = int(rng.integers(0, w - c + 1))
    flip_v = bool(rng.random() < cfg.flip_prob)
    flip_h = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(*cfg.intensity_scale_range))
    shift = float(rng.uniform(*cfg.intensity_shift_range))
    return AugmentParams(top, left, flip_v, flip_h, scale, shift, c)


def apply_augment(img: np.ndarray, mask: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Crop and flip image ``[C, H, W]`` and mask ``[H, W]`` identically;
    rescale intensities of the image only."""
    c = params.crop_size or mask.shape[0]
    rows = slice(params.top, params.top + c)
    cols = slice(params.left, params.left + c)
    img, mask = img[:, rows, cols], mask[rows, cols]
    if params.flip_v:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    if params.flip_h:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    return params.scale * img + params.shift, np.ascontiguousarray(mask)


def augment(img: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Random crop, vertical/horizontal flips, then ``s * x + delta``."""
    if img.shape[1:] != mask.shape:
        raise InvalidSpec(f"image {img.shape} and mask {mask.shape} disagree")
    params = draw_augment_params(mask.shape, cfg, rng)
    return apply_augment(img, mask, params)
