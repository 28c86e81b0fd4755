"""Red-dot gaze overlays composited onto grayscale radiographs."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .gaze import HeatmapGrid

BT601 = (0.299, 0.587, 0.114)


class OverlayError(ValueError):
    pass


class DimensionMismatch(OverlayError):
    pass


class DecodeError(OverlayError):
    def __init__(self, reason: str):
        super().__init__(f"cannot decode image: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("GrayImage needs a 2-D uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RgbImage:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError("RgbImage needs a (h, w, 3) uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_gray(cls, img: GrayImage) -> "RgbImage":
        return cls(np.repeat(img.pixels[:, :, None], 3, axis=2))


@dataclass(frozen=True)
class OverlaySpec:
    color: tuple[int, int, int] = (255, 0, 0)
    dot_radius: int = 2
    alpha_max: float = 0.85
    scale: Literal["linear", "log1p"] = "linear"

    def __post_init__(self):
        if not 0 < self.alpha_max <= 1:
            raise ValueError("alpha_max must be in (0, 1]")
        if self.dot_radius < 0 or int(self.dot_radius) != self.dot_radius:
            raise ValueError("dot_radius must be a non-negative integer")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise ValueError("color must be an 8-bit (r, g, b) triple")
        if self.scale not in ("linear", "log1p"):
            raise ValueError(f"unknown scale {self.scale!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["color"] = list(self.color)
        return d


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an (..., 3) array, rounded half-up to uint8."""
    rgb = rgb.astype(np.float64)
    y = BT601[0] * rgb[..., 0] + BT601[1] * rgb[..., 1] + BT601[2] * rgb[..., 2]
    return np.clip(_round_half_up(y), 0, 255).astype(np.uint8)


def _open(data: bytes) -> Image.Image:
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(str(exc)) from None
    if im.format not in ("PNG", "JPEG"):
        raise DecodeError(f"unsupported container {im.format}")
    return im


def _to_array(im: Image.Image) -> np.ndarray:
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        top = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
        return np.clip(_round_half_up(arr * 255.0 / top), 0, 255).astype(np.uint8)
    if im.mode == "L":
        return np.asarray(im, dtype=np.uint8)
    if im.mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr", "1"):
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise DecodeError(f"unsupported mode {im.mode}")


def decode_image(data: bytes) -> GrayImage:
    """Decode png/jpeg bytes to 8-bit luminance (BT.601 for colour input)."""
    arr = _to_array(_open(data))
    if arr.ndim == 3:
        arr = luma(arr)
    return GrayImage(np.ascontiguousarray(arr))


def decode_rgb(data: bytes) -> RgbImage:
    arr = _to_array(_open(data))
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return RgbImage(np.ascontiguousarray(arr))


def encode_image(img: RgbImage | GrayImage) -> bytes:
    mode = "L" if isinstance(img, GrayImage) else "RGB"
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode=mode).save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def _normalized(counts: np.ndarray, scale: str) -> np.ndarray:
    c_max = counts.max()
    if scale == "linear":
        return counts / c_max
    return np.log1p(counts) / np.log1p(c_max)


def intensity_map(grid: HeatmapGrid, spec: OverlaySpec) -> np.ndarray:
    """Per-pixel summed stamp intensity, clamped to [0, 1]."""
    h, w = grid.height, grid.width
    m = np.zeros((h, w), dtype=np.float64)
    counts = grid.counts
    if not counts.any():
        return m
    norm = _normalized(counts.astype(np.float64), spec.scale)
    k = grid.cell_size
    off = (k - 1) // 2
    rows, cols = np.nonzero(counts)
    centers = np.zeros((h, w), dtype=np.float64)
    cy = np.minimum(rows * k + off, h - 1)
    cx = np.minimum(cols * k + off, w - 1)
    centers[cy, cx] = norm[rows, cols]

    r = spec.dot_radius
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            # shift centers by (dy, dx) and add
            src_y = slice(max(0, -dy), min(h, h - dy))
            dst_y = slice(max(0, dy), min(h, h + dy))
            src_x = slice(max(0, -dx), min(w, w - dx))
            dst_x = slice(max(0, dx), min(w, w + dx))
            m[dst_y, dst_x] += centers[src_y, src_x]
    return np.minimum(m, 1.0)


def render_overlay(img: GrayImage, grid: HeatmapGrid, spec: OverlaySpec | None = None) -> RgbImage:
    """Blend ``spec.color`` over the image with per-pixel weight ``alpha_max * m``.

    ``m`` is the clamped sum of normalized counts from every disc covering the
    pixel. A zero grid returns the grayscale replicated into three channels.
    """
    spec = spec or OverlaySpec()
    if (grid.width, grid.height) != (img.width, img.height):
        raise DimensionMismatch(
            f"grid is {grid.width}x{grid.height}, image is {img.width}x{img.height}"
        )
    if not grid.counts.any():
        return RgbImage.from_gray(img)
    a = spec.alpha_max * intensity_map(grid, spec)
    gray = img.pixels.astype(np.float64)
    out = np.empty((img.height, img.width, 3), dtype=np.uint8)
    for ch, c in enumerate(spec.color):
        blended = (1.0 - a) * gray + a * c
        out[:, :, ch] = np.clip(_round_half_up(blended), 0, 255).astype(np.uint8)
    return RgbImage(out)
