"""Pixel-level color arithmetic: RGB <-> optical density and tissue masking.

Images are numpy arrays throughout: RGB images are uint8 of shape
(height, width, 3); optical density (OD) images are float64 of the same
shape; tissue masks are bool of shape (height, width). Background
intensity is a length-3 float vector (a scalar broadcasts to all
channels).

OD follows Beer-Lambert: od = -ln(I / I_m), so stain contributions add
linearly in OD space. Intensities are floored at 1 before the log and OD
is clamped at 0, which makes the conversion total and keeps the exact
round-trip property for intensities >= 1.
"""

from __future__ import annotations

import struct

import numpy as np

#: Intensity floor applied before the log; prevents ln(0) for black pixels.
INTENSITY_FLOOR = 1.0

#: Default per-channel background intensity for 8-bit images.
DEFAULT_BACKGROUND = 255.0

#: Default mean-OD threshold separating tissue from background.
TISSUE_OD_THRESHOLD = 0.15

_OD_DUMP_MAGIC = b"ODIM"


def as_background(bg) -> np.ndarray:
    """Coerce a scalar or length-3 sequence into a (3,) float background
    vector, validating positivity."""
    arr = np.broadcast_to(np.asarray(bg, dtype=np.float64), (3,)).copy()
    if not np.all(arr > 0):
        raise ValueError(f"background intensity must be > 0 per channel, got {arr}")
    return arr


def validate_rgb(img: np.ndarray) -> np.ndarray:
    """Check RGB image shape/dtype, returning the array unchanged."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 RGB image, got dtype {img.dtype}")
    return img


def rgb_to_od(img: np.ndarray, bg=DEFAULT_BACKGROUND) -> np.ndarray:
    """Convert an 8-bit RGB image to optical densities.

    od = -ln(max(I, 1) / I_m) per channel, clamped to >= 0 so intensities
    above the background level do not produce negative densities.
    """
    img = validate_rgb(img)
    bg = as_background(bg)
    intensities = np.maximum(img.astype(np.float64), INTENSITY_FLOOR)
    od = -np.log(intensities / bg)
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray, bg=DEFAULT_BACKGROUND) -> np.ndarray:
    """Invert rgb_to_od: I = round(I_m * exp(-od)), clamped to [0, 255]."""
    od = np.asarray(od, dtype=np.float64)
    bg = as_background(bg)
    intensities = bg * np.exp(-od)
    return np.clip(np.rint(intensities), 0.0, 255.0).astype(np.uint8)


def estimate_background(img: np.ndarray) -> np.ndarray:
    """Per-channel 95th percentile of pixel intensities, as a background
    estimate for slides without a pure-white field."""
    img = validate_rgb(img)
    est = np.percentile(img.reshape(-1, 3).astype(np.float64), 95, axis=0)
    return np.maximum(est, INTENSITY_FLOOR)


def tissue_mask(od: np.ndarray, threshold: float = TISSUE_OD_THRESHOLD) -> np.ndarray:
    """Boolean mask of tissue pixels: mean OD across channels > threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    od = np.asarray(od, dtype=np.float64)
    return od.mean(axis=2) > threshold


def write_od_dump(path, od: np.ndarray) -> None:
    """Write an OD image as a debug dump: 16-byte header (magic 'ODIM',
    u32 width, u32 height, u32 reserved, little-endian) then row-major
    channel-interleaved float32."""
    od = np.asarray(od, dtype=np.float64)
    height, width = od.shape[:2]
    with open(path, "wb") as f:
        f.write(_OD_DUMP_MAGIC)
        f.write(struct.pack("<III", width, height, 0))
        f.write(od.astype("<f4").tobytes(order="C"))


def read_od_dump(path) -> np.ndarray:
    """Read an OD debug dump written by write_od_dump."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16 or header[:4] != _OD_DUMP_MAGIC:
            raise ValueError(f"{path}: not an OD dump file")
        width, height, _ = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != width * height * 3:
        raise ValueError(f"{path}: truncated OD dump")
    return data.reshape(height, width, 3).astype(np.float64)
