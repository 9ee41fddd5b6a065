"""Deterministic image augmentation operators.

Images are ``uint8`` arrays shaped ``(H, W, C)`` with ``C`` in {1, 3}. Every
operator is a pure function of (action, image) and preserves the shape.
Geometric operators sample bilinearly around the pixel-centre origin with
zero fill outside the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

OP_NAMES = (
    "identity", "auto_contrast", "equalize", "rotate", "solarize", "color", "posterize",
    "contrast", "brightness", "sharpness", "shear_x", "shear_y", "translate_x", "translate_y",
)

# (low, high) accepted magnitude per op; ops without a magnitude accept only 0
MAGNITUDE_RANGES = {
    "identity": (0.0, 0.0),
    "auto_contrast": (0.0, 0.0),
    "equalize": (0.0, 0.0),
    "rotate": (-30.0, 30.0),
    "solarize": (0.0, 256.0),
    "color": (0.1, 1.9),
    "posterize": (1.0, 8.0),
    "contrast": (0.1, 1.9),
    "brightness": (0.1, 1.9),
    "sharpness": (0.1, 1.9),
    "shear_x": (-0.3, 0.3),
    "shear_y": (-0.3, 0.3),
    "translate_x": (-0.3, 0.3),
    "translate_y": (-0.3, 0.3),
}

DEFAULT_MAGNITUDES = {
    "identity": 0.0,
    "auto_contrast": 0.0,
    "equalize": 0.0,
    "rotate": 15.0,
    "solarize": 128.0,
    "color": 1.5,
    "posterize": 4.0,
    "contrast": 1.5,
    "brightness": 1.5,
    "sharpness": 1.5,
    "shear_x": 0.15,
    "shear_y": 0.15,
    "translate_x": 0.15,
    "translate_y": 0.15,
}


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationAction:
    op: str
    magnitude: float = 0.0

    def __post_init__(self):
        if self.op not in MAGNITUDE_RANGES:
            raise AugmentationError(f"unknown augmentation {self.op!r}")
        lo, hi = MAGNITUDE_RANGES[self.op]
        if not (lo <= self.magnitude <= hi):
            raise AugmentationError(f"{self.op}: magnitude {self.magnitude} outside [{lo}, {hi}]")
        if self.op == "posterize" and float(self.magnitude) != int(self.magnitude):
            raise AugmentationError("posterize takes an integer bit count")

    def __str__(self):
        return self.op


def default_bank(size: int | None = None, names=None) -> list[AugmentationAction]:
    """The ordered action space, each op at its fixed default magnitude.

    ``names`` picks a subset (kept in canonical order); ``size`` keeps the first
    ``size`` ops. Positions in the returned list are the action indices.
    """
    ops = list(OP_NAMES)
    if names is not None:
        unknown = set(names) - set(OP_NAMES)
        if unknown:
            raise AugmentationError(f"unknown augmentations {sorted(unknown)}")
        ops = [op for op in OP_NAMES if op in set(names)]
    if size is not None:
        if not 1 <= size <= len(ops):
            raise AugmentationError(f"bank size must be in [1, {len(ops)}]")
        ops = ops[:size]
    return [AugmentationAction(op, DEFAULT_MAGNITUDES[op]) for op in ops]


def check_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise AugmentationError(f"image must be (H, W, 1|3), got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise AugmentationError("zero-sized image")
    if img.dtype != np.uint8:
        raise AugmentationError(f"image must be uint8, got {img.dtype}")
    return img


def apply(action: AugmentationAction, image) -> np.ndarray:
    img = check_image(image)
    out = _OPS[action.op](img, action.magnitude)
    return np.ascontiguousarray(out, dtype=np.uint8)


def _to_u8(x) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _blend(degenerate, img, factor):
    return _to_u8(degenerate + factor * (img.astype(np.float64) - degenerate))


def _grayscale(img) -> np.ndarray:
    if img.shape[2] == 1:
        return img[..., 0].astype(np.float64)
    r, g, b = (img[..., i].astype(np.float64) for i in range(3))
    return np.floor(r * 0.299 + g * 0.587 + b * 0.114 + 0.5)


def _sample(img, xs, ys):
    """Bilinear sampling of ``img`` at source coords (xs, ys), zero outside."""
    h, w, c = img.shape
    src = img.astype(np.float64)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros((h, w, c))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros((h, w, c))
            vals[inside] = src[yi[inside], xi[inside]]
            out += wy * wx * vals
    return _to_u8(out)


def _grid(img):
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys, (w - 1) / 2.0, (h - 1) / 2.0


def _rotate(img, degrees):
    xs, ys, cx, cy = _grid(img)
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)
    # inverse map: rotate output coords by -t to find the source pixel
    dx, dy = xs - cx, ys - cy
    return _sample(img, cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)


def _shear_x(img, s):
    xs, ys, cx, cy = _grid(img)
    return _sample(img, xs + s * (ys - cy), ys)


def _shear_y(img, s):
    xs, ys, cx, cy = _grid(img)
    return _sample(img, xs, ys + s * (xs - cx))


def _translate_x(img, t):
    xs, ys, _, _ = _grid(img)
    return _sample(img, xs - t * img.shape[1], ys)


def _translate_y(img, t):
    xs, ys, _, _ = _grid(img)
    return _sample(img, xs, ys - t * img.shape[0])


def _auto_contrast(img, _):
    out = img.copy()
    for ch in range(img.shape[2]):
        band = img[..., ch].astype(np.float64)
        lo, hi = band.min(), band.max()
        if hi > lo:
            out[..., ch] = _to_u8((band - lo) * 255.0 / (hi - lo))
    return out


def _equalize(img, _):
    out = img.copy()
    for ch in range(img.shape[2]):
        band = img[..., ch]
        hist = np.bincount(band.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (nonzero.sum() - nonzero[-1]) // 255
        if step == 0:
            continue
        lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
        out[..., ch] = np.clip(lut, 0, 255).astype(np.uint8)[band]
    return out


def _solarize(img, threshold):
    return np.where(img >= threshold, 255 - img, img)


def _posterize(img, bits):
    mask = (0xFF << (8 - int(bits))) & 0xFF
    return img & np.uint8(mask)


def _color(img, factor):
    if img.shape[2] == 1:
        return img.copy()
    gray = _grayscale(img)[..., None]
    return _blend(np.repeat(gray, 3, axis=2), img, factor)


def _contrast(img, factor):
    mean = math.floor(_grayscale(img).mean() + 0.5)
    return _blend(np.full(img.shape, float(mean)), img, factor)


def _brightness(img, factor):
    return _blend(np.zeros(img.shape), img, factor)


def _sharpness(img, factor):
    src = img.astype(np.float64)
    smooth = src.copy()
    h, w = img.shape[:2]
    if h > 2 and w > 2:
        acc = np.zeros((h - 2, w - 2, img.shape[2]))
        for dy in range(3):
            for dx in range(3):
                acc += src[dy:dy + h - 2, dx:dx + w - 2]
        acc += 4.0 * src[1:-1, 1:-1]
        smooth[1:-1, 1:-1] = np.rint(acc / 13.0)
    return _blend(smooth, img, factor)


_OPS = {
    "identity": lambda img, _: img.copy(),
    "auto_contrast": _auto_contrast,
    "equalize": _equalize,
    "rotate": _rotate,
    "solarize": _solarize,
    "color": _color,
    "posterize": _posterize,
    "contrast": _contrast,
    "brightness": _brightness,
    "sharpness": _sharpness,
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
}


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


def write_png(path, image) -> None:
    img = check_image(image)
    mode_img = img[..., 0] if img.shape[2] == 1 else img
    PILImage.fromarray(mode_img).save(Path(path), format="PNG")
