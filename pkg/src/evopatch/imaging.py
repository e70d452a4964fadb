"""Preprocessing, augmentation and patch stacking for grayscale face images."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Chromosome, PatchRect, chromosome_rects


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster, shape (height, width), with its nose landmark."""

    data: np.ndarray
    nose: tuple[int, int]
    label: int = 0
    subject: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {data.shape}")
        if data.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {data.dtype}")
        object.__setattr__(self, "data", data)
        nx, ny = (int(round(v)) for v in self.nose)
        object.__setattr__(self, "nose", (nx, ny))
        h, w = data.shape
        if not (0 <= nx < w and 0 <= ny < h):
            raise ValueError(f"nose {self.nose} outside {w}x{h} image")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    def with_data(self, data: np.ndarray, nose: tuple[int, int] | None = None) -> "GrayImage":
        return replace(self, data=data, nose=self.nose if nose is None else nose)


@dataclass(frozen=True, eq=False)
class StackedPatches:
    """K patches of beta x alpha stacked as channels, values in [0, 1]."""

    data: np.ndarray  # (beta, alpha, K)
    label: int

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class AugmentConfig:
    blur_sigmas: tuple[float, float] = (1.0, 2.0)
    noise_sigmas: tuple[float, float] = (8.0, 16.0)
    angles: tuple[float, ...] = (-10.0, -5.0, 5.0, 10.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**{k: tuple(v) for k, v in d.items()})


_LUMA = np.array([0.299, 0.587, 0.114])


def _round_u8(x: np.ndarray) -> np.ndarray:
    # round half up, then saturate
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {rgb.shape} {rgb.dtype}")
    return _round_u8(rgb.astype(np.float64) @ _LUMA)


def equalize_array(data: np.ndarray) -> np.ndarray:
    hist = np.bincount(data.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = cdf[-1]
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    if n == cdf_min:
        return data.copy()
    lut = _round_u8((cdf - cdf_min) / (n - cdf_min) * 255.0)
    return lut[data]


def hist_equalize(img: GrayImage) -> GrayImage:
    return img.with_data(equalize_array(img.data))


def flip_horizontal(img: GrayImage) -> GrayImage:
    nx, ny = img.nose
    return img.with_data(img.data[:, ::-1].copy(), (img.width - 1 - nx, ny))


def blur(img: GrayImage, sigma: float) -> GrayImage:
    out = ndimage.gaussian_filter(img.data.astype(np.float64), sigma, mode="nearest")
    return img.with_data(_round_u8(out))


def add_noise(img: GrayImage, sigma: float, rng: np.random.Generator) -> GrayImage:
    noisy = img.data.astype(np.float64) + rng.normal(0.0, sigma, size=img.data.shape)
    return img.with_data(_round_u8(noisy))


def rotate_point(x: float, y: float, angle: float, center: tuple[float, float]) -> tuple[float, float]:
    """Where (x, y) lands when the image is rotated ``angle`` degrees counter-clockwise on screen."""
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    dx, dy = x - center[0], y - center[1]
    # y axis points down, so a visual CCW turn uses this sign pattern
    return center[0] + c * dx + s * dy, center[1] - s * dx + c * dy


def rotate(img: GrayImage, angle: float) -> GrayImage:
    """Rotate about the image centre with edge-replicate fill; the nose follows."""
    h, w = img.data.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    # affine_transform pulls from src = matrix @ dst + offset, in (row, col) order;
    # this is the inverse of rotate_point written for (dy, dx)
    matrix = np.array([[c, s], [-s, c]])
    center = np.array([cy, cx])
    offset = center - matrix @ center
    out = ndimage.affine_transform(
        img.data.astype(np.float64), matrix, offset=offset, order=1, mode="nearest"
    )
    nx, ny = rotate_point(*img.nose, angle, (cx, cy))
    nx = min(max(int(round(nx)), 0), w - 1)
    ny = min(max(int(round(ny)), 0), h - 1)
    return img.with_data(_round_u8(out), (nx, ny))


def augment(img: GrayImage, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> list[GrayImage]:
    """The nine extra training variants of one image: flip, 2 blurs, 2 noises, 4 rotations."""
    out = [flip_horizontal(img)]
    out += [blur(img, s) for s in cfg.blur_sigmas]
    out += [add_noise(img, s, rng) for s in cfg.noise_sigmas]
    out += [rotate(img, a) for a in cfg.angles]
    if len(out) != 9:
        raise ValueError(f"augmentation config yields {len(out)} variants, expected 9")
    return out


def augment_dataset(
    images: Sequence[GrayImage], rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()
) -> list[GrayImage]:
    """Originals followed by their variants, so len(result) == 10 * len(images)."""
    out = list(images)
    for img in images:
        out.extend(augment(img, rng, cfg))
    return out


def extract_and_stack(img: GrayImage, c: Chromosome, dtype=np.float64) -> StackedPatches:
    rects = chromosome_rects(c, img.nose, img.dims)
    planes = [img.data[r.top : r.bottom, r.left : r.right] for r in rects]
    data = np.stack(planes, axis=-1).astype(dtype) / dtype(255.0)
    return StackedPatches(data, img.label)


def stack_dataset(images: Sequence[GrayImage], c: Chromosome, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`extract_and_stack`: returns (N, beta, alpha, K) inputs and labels."""
    x = np.empty((len(images), c.beta, c.alpha, len(c)), dtype=dtype)
    for i, img in enumerate(images):
        for k, r in enumerate(chromosome_rects(c, img.nose, img.dims)):
            x[i, :, :, k] = img.data[r.top : r.bottom, r.left : r.right]
    x /= dtype(255.0)
    return x, np.array([img.label for img in images], dtype=np.int64)


def full_dataset(images: Sequence[GrayImage], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Whole images as single-channel network inputs."""
    x = np.stack([img.data for img in images])[..., None].astype(dtype) / dtype(255.0)
    return x, np.array([img.label for img in images], dtype=np.int64)


# --- file I/O ---------------------------------------------------------------


def read_pixels(path: str | Path) -> np.ndarray:
    """Load PNG or binary PGM as a uint8 grayscale array (RGB is converted with BT.601)."""
    with Image.open(path) as im:
        if im.mode in ("L", "1"):
            arr = np.asarray(im.convert("L"))
        elif im.mode in ("I;16", "I;16B", "I"):
            raise ValueError(f"{path}: only 8-bit images are supported (mode {im.mode})")
        else:
            arr = to_gray(np.asarray(im.convert("RGB")))
    return np.ascontiguousarray(arr, dtype=np.uint8)


def write_png(path: str | Path, data: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(data, dtype=np.uint8)).save(path, format="PNG")


def draw_rects(data: np.ndarray, rects: Sequence[PatchRect], value: int = 255) -> np.ndarray:
    """Copy of ``data`` with 1-px rectangle borders burned in."""
    out = data.copy()
    for r in rects:
        out[r.top, r.left : r.right] = value
        out[r.bottom - 1, r.left : r.right] = value
        out[r.top : r.bottom, r.left] = value
        out[r.top : r.bottom, r.right - 1] = value
    return out
