"""8-bit image import/export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .manipulator import resize_bilinear


def load_image(path: str | Path, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Read a PNG/JPEG as (3, H, W) float32 in [0, 1], resized when a size is given."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img = arr.transpose(2, 0, 1)
    if height is not None and width is not None and img.shape[1:] != (height, width):
        img = np.clip(resize_bilinear(img, height, width), 0.0, 1.0)
    return np.ascontiguousarray(img)


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round to the nearest 8-bit level."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image as 8-bit RGB PNG."""
    Image.fromarray(quantize(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def save_map_png(path: str | Path, m: np.ndarray) -> None:
    """Write a (1, H, W) or (H, W) map in [0, 1] as grayscale PNG."""
    m = np.asarray(m).reshape(m.shape[-2:])
    Image.fromarray(quantize(m), mode="L").save(path, format="PNG")
