"""PNG image I/O. All pipeline images are 8-bit RGB."""

from __future__ import annotations

import numpy as np
from PIL import Image


def load_rgb_png(path) -> np.ndarray:
    """Load an image file as a (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_rgb_png(path, img: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as PNG."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
