"""Seeded random affine augmentation with nearest-neighbour sampling.

Transforms compose as flip o shift o shear o zoom o rotate, all pivoted
on the image center. The stored matrix maps output pixel coordinates to
input coordinates (the inverse mapping), so application is a single
gather. Sampling is pure nearest-neighbour with border clamping, which
guarantees every output pixel value is copied from some input pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation parameter ranges.

    shear_range is a shear angle in radians along the x-axis; zoom is
    drawn from [1 - zoom_range, 1 + zoom_range]; shifts are fractions of
    width/height; rotation_range is in degrees.
    """

    shear_range: float = 0.2
    zoom_range: float = 0.2
    rotation_range: float = 25.0
    horizontal_flip: bool = True
    width_shift_range: float = 0.1
    height_shift_range: float = 0.1
    fill_mode: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        ranges = (self.shear_range, self.zoom_range, self.rotation_range,
                  self.width_shift_range, self.height_shift_range)
        if any(r < 0 for r in ranges):
            raise ValueError("augmentation ranges must be >= 0")
        if self.zoom_range >= 1.0:
            raise ValueError("zoom_range must be < 1")
        if self.fill_mode != "nearest":
            raise ValueError(f"unsupported fill_mode {self.fill_mode!r}")


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix taking output (x, y, 1) to input (x, y)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"expected 2x3 affine matrix, got {m.shape}")
        if not np.all(np.isfinite(m)) or np.isclose(np.linalg.det(m[:, :2]), 0.0):
            raise ValueError("affine transform must be finite and invertible")
        object.__setattr__(self, "matrix", m)


def _homogeneous(linear, tx=0.0, ty=0.0) -> np.ndarray:
    m = np.eye(3)
    m[:2, :2] = linear
    m[0, 2] = tx
    m[1, 2] = ty
    return m


def make_transform(
    width: int,
    height: int,
    shear: float = 0.0,
    zoom: float = 1.0,
    rotation_deg: float = 0.0,
    shift_x: float = 0.0,
    shift_y: float = 0.0,
    flip: bool = False,
) -> AffineTransform:
    """Build the inverse-mapping transform for the given draw.

    The forward map is flip o shift o shear o zoom o rotate about the
    image center; the inverse is composed from the elementary inverses
    analytically so zero draws yield the exact identity.
    """
    angle = np.deg2rad(rotation_deg)
    # Elementary inverses, composed in reverse order of the forward map.
    inv_rot = _homogeneous([[np.cos(angle), np.sin(angle)],
                            [-np.sin(angle), np.cos(angle)]]) if angle else np.eye(3)
    inv_zoom = _homogeneous([[1.0 / zoom, 0.0], [0.0, 1.0 / zoom]]) if zoom != 1.0 else np.eye(3)
    inv_shear = _homogeneous([[1.0, -np.tan(shear)], [0.0, 1.0]]) if shear else np.eye(3)
    inv_shift = _homogeneous(np.eye(2), -shift_x, -shift_y)
    inv_flip = _homogeneous([[-1.0, 0.0], [0.0, 1.0]]) if flip else np.eye(3)

    inv_centered = inv_rot @ inv_zoom @ inv_shear @ inv_shift @ inv_flip
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    full = _homogeneous(np.eye(2), cx, cy) @ inv_centered @ _homogeneous(np.eye(2), -cx, -cy)
    return AffineTransform(matrix=full[:2])


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator,
                     width: int, height: int) -> AffineTransform:
    """Draw one random transform.

    Draw order is fixed (shear, rotation, zoom, shift x, shift y, flip)
    so a seeded generator reproduces the same sequence.
    """
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range) if cfg.shear_range else 0.0
    rotation = (rng.uniform(-cfg.rotation_range, cfg.rotation_range)
                if cfg.rotation_range else 0.0)
    zoom = (rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
            if cfg.zoom_range else 1.0)
    shift_x = (rng.uniform(-cfg.width_shift_range, cfg.width_shift_range) * width
               if cfg.width_shift_range else 0.0)
    shift_y = (rng.uniform(-cfg.height_shift_range, cfg.height_shift_range) * height
               if cfg.height_shift_range else 0.0)
    flip = bool(rng.integers(0, 2)) if cfg.horizontal_flip else False
    return make_transform(width, height, shear=shear, zoom=zoom,
                          rotation_deg=rotation, shift_x=shift_x,
                          shift_y=shift_y, flip=flip)


def apply_transform(img: np.ndarray, t: AffineTransform) -> np.ndarray:
    """Warp an image by inverse mapping with nearest-neighbour sampling.

    Source coordinates are rounded half-up and clamped to the image
    bounds, which doubles as nearest-edge fill at the borders.
    """
    img = np.asarray(img)
    height, width = img.shape[:2]
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    m = t.matrix
    src_x = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    src_y = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    ix = np.clip(np.floor(src_x + 0.5).astype(np.intp), 0, width - 1)
    iy = np.clip(np.floor(src_y + 0.5).astype(np.intp), 0, height - 1)
    return img[iy, ix]


def augment_stream(img: np.ndarray, cfg: AugmentConfig, count: int):
    """Yield `count` independent augmented copies of an image.

    The sequence is deterministic for a fixed cfg.seed.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    img = np.asarray(img)
    height, width = img.shape[:2]
    rng = np.random.default_rng(cfg.seed)
    for _ in range(count):
        t = sample_transform(cfg, rng, width, height)
        yield apply_transform(img, t)
