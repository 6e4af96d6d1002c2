"""Pixel-level primitives used by the synthesis pipeline.

Images are plain numpy arrays:

* RGB raster: ``uint8`` of shape ``(H, W, 3)``
* gray raster: ``uint8`` of shape ``(H, W)``
* binary mask: ``bool`` of shape ``(H, W)``

Every function here is pure; inputs are never modified in place.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import DegenerateSegmentError, InvalidArgumentError, PlacementError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner ``(x, y)`` and extent ``(w, h)``."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise InvalidArgumentError(f"bbox extent must be >= 1, got {self.w}x{self.h}")

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height

    def contains(self, other: "BBox") -> bool:
        return (
            other.x >= self.x
            and other.y >= self.y
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values) -> "BBox":
        x, y, w, h = (int(v) for v in values)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class TransformParams:
    angle: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.angle < 360.0:
            raise InvalidArgumentError(f"angle must lie in [0, 360), got {self.angle}")
        if self.scale <= 0 or self.brightness <= 0 or self.contrast <= 0:
            raise InvalidArgumentError("scale, brightness and contrast must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        return cls(
            angle=float(d["angle"]),
            scale=float(d["scale"]),
            hflip=bool(d["hflip"]),
            brightness=float(d["brightness"]),
            contrast=float(d["contrast"]),
        )


def round_half_away(x):
    """Round half away from zero (numpy's ``round`` is half-to-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(x) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def check_rgb(img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"expected uint8 (H, W, 3) image, got {img.dtype} {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidArgumentError("image must be at least 1x1")


def to_grayscale(img: np.ndarray) -> np.ndarray:
    check_rgb(img)
    rgb = img.astype(np.int64)
    # integer form of round(0.299 R + 0.587 G + 0.114 B), half rounds up
    acc = 299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]
    return np.clip((acc + 500) // 1000, 0, 255).astype(np.uint8)


def erode_min(img: np.ndarray, kernel: int) -> np.ndarray:
    """Minimum filter over a ``kernel x kernel`` window, border replicated."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgumentError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return img.copy()
    r = kernel // 2
    padded = np.pad(img, r, mode="edge")
    # a square window minimum separates into row then column minima
    rows = sliding_window_view(padded, kernel, axis=1).min(axis=-1)
    return sliding_window_view(rows, kernel, axis=0).min(axis=-1)


def threshold_above(img: np.ndarray, t: int) -> np.ndarray:
    return img > t


def mask_bbox(mask: np.ndarray) -> BBox | None:
    """Tight bounding box of the true pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def crop(img: np.ndarray, box: BBox) -> np.ndarray:
    return img[box.y : box.y1, box.x : box.x1].copy()


def tighten(crop_img: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Crop a segment down to the bounding box of its mask."""
    box = mask_bbox(mask)
    if box is None:
        raise DegenerateSegmentError("segment mask is empty")
    return crop(crop_img, box), crop(mask, box)


def _bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``src`` (H, W, C) at float coordinates, clamping to the border."""
    h, w = src.shape[:2]
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _resize_float(src: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = src.shape[:2]
    if (new_w, new_h) == (w, h):
        return src.copy()
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _bilinear(src, gx, gy)


def _resize_mask(mask: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = mask.shape
    if (new_w, new_h) == (w, h):
        return mask.copy()
    xi = np.minimum(np.floor((np.arange(new_w) + 0.5) * (w / new_w)).astype(np.intp), w - 1)
    yi = np.minimum(np.floor((np.arange(new_h) + 0.5) * (h / new_h)).astype(np.intp), h - 1)
    return mask[np.ix_(yi, xi)]


def resize_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize of an RGB raster with pixel-center alignment."""
    return to_uint8(_resize_float(img.astype(np.float64), new_w, new_h))


def _snap(v: float) -> float:
    # keeps right-angle rotations exact permutations
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def _rotate(src: np.ndarray, mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate clockwise (y axis down) about the center onto an expanded canvas."""
    h, w = mask.shape
    theta = math.radians(angle)
    c, s = _snap(math.cos(theta)), _snap(math.sin(theta))
    new_w = max(1, math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    new_h = max(1, math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    cx_src, cy_src = (w - 1) / 2.0, (h - 1) / 2.0
    cx_dst, cy_dst = (new_w - 1) / 2.0, (new_h - 1) / 2.0
    gx, gy = np.meshgrid(np.arange(new_w) - cx_dst, np.arange(new_h) - cy_dst)
    xs = c * gx + s * gy + cx_src
    ys = -s * gx + c * gy + cy_src
    xi = np.floor(xs + 0.5).astype(np.intp)
    yi = np.floor(ys + 0.5).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out_mask = np.zeros((new_h, new_w), dtype=bool)
    out_mask[inside] = mask[yi[inside], xi[inside]]
    return _bilinear(src, xs, ys), out_mask


def transform_segment(
    crop_img: np.ndarray, mask: np.ndarray, params: TransformParams
) -> tuple[np.ndarray, np.ndarray]:
    """Flip, scale, rotate, then jitter brightness/contrast on masked pixels.

    The crop is resampled bilinearly and the mask by nearest neighbour.
    Rotation expands the canvas to hold the whole rotated crop; pixels
    that fall outside the source are masked out.
    """
    check_rgb(crop_img)
    if mask.shape != crop_img.shape[:2]:
        raise InvalidArgumentError(f"mask {mask.shape} does not match crop {crop_img.shape[:2]}")

    img = crop_img.astype(np.float64)
    m = mask.astype(bool)
    if params.hflip:
        img = img[:, ::-1]
        m = m[:, ::-1]
    if params.scale != 1.0:
        h, w = m.shape
        new_w = max(1, int(round_half_away(w * params.scale)))
        new_h = max(1, int(round_half_away(h * params.scale)))
        img = _resize_float(img, new_w, new_h)
        m = _resize_mask(m, new_w, new_h)
    if params.angle != 0.0:
        img, m = _rotate(img, m, params.angle)
    if params.brightness != 1.0 or params.contrast != 1.0:
        jittered = (img * params.brightness - 128.0) * params.contrast + 128.0
        img = np.where(m[..., None], jittered, img)

    if not m.any():
        raise DegenerateSegmentError("transformed segment mask is empty")
    return to_uint8(img), np.ascontiguousarray(m)


def blend_segment(
    bg: np.ndarray, crop_img: np.ndarray, mask: np.ndarray, at: BBox, c: float
) -> np.ndarray:
    """Paste a segment with composition coefficient ``c`` (1 = opaque)."""
    check_rgb(bg)
    if not at.inside(bg.shape[1], bg.shape[0]):
        raise PlacementError(f"{at} does not fit inside a {bg.shape[1]}x{bg.shape[0]} image")
    if crop_img.shape[:2] != (at.h, at.w) or mask.shape != (at.h, at.w):
        raise PlacementError("crop and mask must match the placement box")
    if not 0.0 < c <= 1.0:
        raise InvalidArgumentError(f"composition coefficient must lie in (0, 1], got {c}")

    out = bg.copy()
    region = out[at.y : at.y1, at.x : at.x1]
    mixed = to_uint8(c * crop_img.astype(np.float64) + (1.0 - c) * region.astype(np.float64))
    region[mask] = mixed[mask]
    return out


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_rgb(path, img: np.ndarray) -> None:
    check_rgb(img)
    Image.fromarray(img).save(Path(path), format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(Path(path), format="PNG")
