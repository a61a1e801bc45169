"""Toy manipulations, ground-truth maps, degradations and the toy image source.

Everything here operates on plain numpy arrays shaped (B, C, H, W) with values
in [0, 1]; nothing is differentiable by design.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

MANIPULATION_KINDS = ("region_recolor", "local_blur", "patch_swap", "none")
DEGRADATION_KINDS = ("jpeg", "blur", "noise", "lowres")

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ManipulationError(ValueError):
    pass


@dataclass(frozen=True)
class ManipulationSpec:
    kind: str = "none"
    region: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, left, height, width
    strength: float = 1.0
    seed: int = 0

    def validate(self, height: int, width: int) -> None:
        if self.kind not in MANIPULATION_KINDS:
            raise ManipulationError(f"unknown manipulation kind {self.kind!r}")
        if self.kind == "none":
            return
        top, left, h, w = self.region
        if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > height or left + w > width:
            raise ManipulationError(f"region {self.region} outside {height}x{width} image")
        if not 0.0 <= self.strength <= 1.0:
            raise ManipulationError(f"strength {self.strength} outside [0, 1]")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    level: float

    def validate(self) -> None:
        k, lv = self.kind, self.level
        if k == "jpeg":
            ok = 1 <= lv <= 100
        elif k == "blur":
            ok = lv >= 1 and int(lv) == lv and int(lv) % 2 == 1
        elif k == "noise":
            ok = lv >= 0
        elif k == "lowres":
            ok = lv >= 1
        else:
            raise ManipulationError(f"unknown degradation kind {k!r}")
        if not ok:
            raise ManipulationError(f"invalid level {lv} for degradation {k!r}")


# --------------------------------------------------------------- manipulation
def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def _blur_image(img: np.ndarray, size: int, sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur of (C, H, W) with reflect padding."""
    if size == 1:
        return img.copy()
    sigma = sigma if sigma is not None else size / 3.0
    k = _gaussian_kernel1d(size, sigma)
    r = size // 2
    mode = "reflect" if min(img.shape[1:]) > r else "symmetric"
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode=mode)
    H, W = img.shape[1:]
    tmp = sum(k[i] * padded[:, i:i + H, :] for i in range(size))
    return sum(k[j] * tmp[:, :, j:j + W] for j in range(size)).astype(img.dtype)


def _manipulate_one(img: np.ndarray, spec: ManipulationSpec) -> np.ndarray:
    out = img.copy()
    if spec.kind == "none" or spec.strength == 0:
        return out
    top, left, h, w = spec.region
    rng = np.random.default_rng(spec.seed)
    s = np.float32(spec.strength)
    region = img[:, top:top + h, left:left + w]
    if spec.kind == "region_recolor":
        color = rng.uniform(0.0, 1.0, size=(img.shape[0], 1, 1)).astype(img.dtype)
        # keep the new color visibly away from the current region mean
        mean = region.mean(axis=(1, 2), keepdims=True)
        color = np.where(np.abs(color - mean) < 0.25, (mean + 0.5) % 1.0, color).astype(img.dtype)
        shade = rng.uniform(-0.05, 0.05, size=(1, h, w)).astype(img.dtype)
        new = np.clip(color + shade, 0.0, 1.0)
    elif spec.kind == "local_blur":
        size = 2 * int(rng.integers(1, 3)) + 1
        sigma = 0.8 + 1.2 * float(rng.uniform())
        new = _blur_image(img, size, sigma)[:, top:top + h, left:left + w]
        # blur alone can leave flat regions untouched; add a mild smooth tint
        new = np.clip(new + rng.uniform(-0.08, 0.08, size=(img.shape[0], 1, 1)), 0.0, 1.0).astype(img.dtype)
    else:  # patch_swap
        H, W = img.shape[1:]
        for _ in range(16):
            st = int(rng.integers(0, H - h + 1))
            sl = int(rng.integers(0, W - w + 1))
            if (st, sl) != (top, left):
                break
        new = img[:, st:st + h, sl:sl + w].copy()
        if (st, sl) == (top, left):
            new = new[:, ::-1, ::-1].copy()
    out[:, top:top + h, left:left + w] = (1 - s) * region + s * new
    return out


def toy_manipulate(x: np.ndarray, spec: ManipulationSpec | Sequence[ManipulationSpec]) -> np.ndarray:
    """Apply one spec to every image, or one spec per image."""
    x = np.asarray(x)
    specs = [spec] * len(x) if isinstance(spec, ManipulationSpec) else list(spec)
    if len(specs) != len(x):
        raise ManipulationError(f"{len(specs)} specs for {len(x)} images")
    H, W = x.shape[2:]
    out = np.empty_like(x)
    for i, (img, sp) in enumerate(zip(x, specs)):
        sp.validate(H, W)
        out[i] = _manipulate_one(img, sp)
    return out


def random_manipulation_spec(rng: np.random.Generator, height: int, width: int,
                             min_frac: float = 0.05, max_frac: float = 0.5,
                             strength_range: tuple[float, float] = (0.6, 1.0)) -> ManipulationSpec:
    """A random non-identity manipulation covering min_frac..max_frac of the image."""
    kind = MANIPULATION_KINDS[int(rng.integers(0, 3))]
    frac = rng.uniform(min_frac, max_frac)
    aspect = np.exp(rng.uniform(-0.5, 0.5))
    area = frac * height * width
    h = int(np.clip(round(np.sqrt(area * aspect)), 2, height))
    w = int(np.clip(round(area / h), 2, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return ManipulationSpec(kind=kind, region=(top, left, h, w),
                            strength=float(rng.uniform(*strength_range)),
                            seed=int(rng.integers(0, 2**31 - 1)))


def ground_truth_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """gray(|a - b|) for (B, 3, H, W) inputs, as (B, 1, H, W) in [0, 1]."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ManipulationError(f"ground_truth_map shapes {a.shape} and {b.shape} differ")
    diff = np.abs(a.astype(np.float32) - b.astype(np.float32))
    gray = np.tensordot(GRAY_WEIGHTS, diff, axes=([0], [1]))  # (B, H, W)
    return np.clip(gray, 0.0, 1.0)[:, None].astype(np.float32)


# ----------------------------------------------------------------- degradation
def _jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    u8 = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    dec = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return dec.transpose(2, 0, 1)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) float image."""
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((width, height), Image.BILINEAR))
             for c in img]
    return np.stack(chans).astype(img.dtype)


def degrade(x: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    spec.validate()
    x = np.asarray(x)
    if spec.kind == "noise":
        if spec.level == 0:
            return x.copy()
        rng = rng if rng is not None else np.random.default_rng(0)
        return np.clip(x + rng.normal(0.0, spec.level, size=x.shape).astype(x.dtype), 0.0, 1.0)
    out = np.empty_like(x)
    H, W = x.shape[2:]
    for i, img in enumerate(x):
        if spec.kind == "jpeg":
            out[i] = _jpeg(img, int(spec.level))
        elif spec.kind == "blur":
            out[i] = np.clip(_blur_image(img, int(spec.level)), 0.0, 1.0)
        else:
            f = float(spec.level)
            small = resize_bilinear(img, max(1, round(H / f)), max(1, round(W / f)))
            out[i] = np.clip(resize_bilinear(small, H, W), 0.0, 1.0)
    return out


# reference severities at full schedule intensity
BASE_DEGRADATION_LEVELS = {"jpeg": 50.0, "blur": 3.0, "noise": 0.05, "lowres": 2.0}


def scaled_degradation(kind: str, intensity: float) -> DegradationSpec:
    """Degradation of ``kind`` at a fraction ``intensity`` of its base severity."""
    base = BASE_DEGRADATION_LEVELS[kind]
    s = float(np.clip(intensity, 0.0, 1.0))
    if kind == "jpeg":
        level = round(100 - s * (100 - base))
    elif kind == "blur":
        level = 2 * round(s * (base - 1) / 2) + 1
    elif kind == "noise":
        level = s * base
    elif kind == "lowres":
        level = 1 + s * (base - 1)
    else:
        raise ManipulationError(f"unknown degradation kind {kind!r}")
    return DegradationSpec(kind, float(level))


# ------------------------------------------------------------------ toy images
def make_toy_images(n: int, rng: np.random.Generator, height: int = 32, width: int = 32) -> np.ndarray:
    """Smooth random gradients with a few random shapes drawn on top."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    out = np.empty((n, 3, height, width), dtype=np.float32)
    for i in range(n):
        c0 = rng.uniform(0.1, 0.9, size=(3, 1, 1))
        gy = rng.uniform(-0.4, 0.4, size=(3, 1, 1))
        gx = rng.uniform(-0.4, 0.4, size=(3, 1, 1))
        img = c0 + gy * (yy - 0.5) + gx * (xx - 0.5)
        for _ in range(int(rng.integers(1, 5))):
            color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
            cy, cx = rng.uniform(0, 1, size=2)
            if rng.uniform() < 0.5:
                r = rng.uniform(0.08, 0.3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                hh, ww = rng.uniform(0.1, 0.45, size=2)
                mask = (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
            img = np.where(mask[None], color, img)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


@dataclass
class ToyDataset:
    """Seeded stream of toy images; each ``batch`` call advances the stream."""

    height: int = 32
    width: int = 32
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def batch(self, n: int) -> np.ndarray:
        return make_toy_images(n, self._rng, self.height, self.width)


class FolderDataset:
    """PNG/JPEG images from a folder, resized bilinearly to the model size."""

    def __init__(self, root: str | Path, height: int = 32, width: int = 32, seed: int = 0):
        from .imageio import load_image

        paths = sorted(p for p in Path(root).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
        if not paths:
            raise ManipulationError(f"no PNG/JPEG images in {root}")
        self.images = np.stack([load_image(p, height, width) for p in paths])
        self._rng = np.random.default_rng(seed)

    def batch(self, n: int) -> np.ndarray:
        idx = self._rng.integers(0, len(self.images), size=n)
        return self.images[idx].copy()
