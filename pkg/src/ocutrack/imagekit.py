"""Grayscale image / binary mask types, PGM I/O, and low-level raster ops.

Intensities are 32-bit floats in [0, 1] everywhere inside the package; 8-bit
integers exist only at the PGM file boundary. Binary PGM (P5) is the sole
raster format: writes are 8-bit with the canonical header
``P5\\n<w> <h>\\n<maxval>\\n``, reads accept up to 16-bit and comments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, ImageTooSmall, MalformedHeader, TruncatedData


@dataclass(frozen=True)
class GrayImage:
    """2-D intensity raster, float32 in [0, 1], shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if p.ndim != 2:
            raise DimensionMismatch(f"expected 2-D pixel array, got ndim={p.ndim}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """2-D boolean raster, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=bool)
        if p.ndim != 2:
            raise DimensionMismatch(f"expected 2-D mask array, got ndim={p.ndim}")
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass(frozen=True)
class GradientField:
    """Per-pixel gradient magnitude (>= 0) and direction in (-pi, pi].

    Direction is defined as 0 wherever magnitude is 0.
    """

    magnitude: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class Region:
    """One connected component of a mask.

    ``bbox`` is half-open: (x0, y0, x1, y1) with x1/y1 one past the last
    pixel. ``centroid`` is the unweighted (x, y) mean of member pixels.
    ``mean_intensity`` is populated only when an intensity image was given.
    """

    label: int
    area: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    mean_intensity: float | None = None


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*(\S+)")


def _read_header_tokens(data: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    """Pull `count` whitespace/comment-separated tokens starting at `start`."""
    tokens = []
    pos = start
    for _ in range(count):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeader("PGM header ended early")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def load_pgm(data: bytes) -> GrayImage:
    """Decode a binary PGM (magic P5, maxval <= 65535) into a GrayImage.

    Intensities are scaled by 1/maxval. Comment lines are tolerated after
    the magic. Raises MalformedHeader for bad structure, TruncatedData when
    the raster is shorter than width*height samples.
    """
    if not data.startswith(b"P5"):
        raise MalformedHeader("missing P5 magic")
    if len(data) < 3 or data[2:3] not in b" \t\n\r\x0b\x0c#":
        raise MalformedHeader("magic not followed by whitespace")
    try:
        (w_tok, h_tok, max_tok), pos = _read_header_tokens(data, 3, 2)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, MalformedHeader) as exc:
        raise MalformedHeader(str(exc)) from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise MalformedHeader(f"maxval {maxval} out of range")
    # exactly one whitespace byte separates header from raster
    pos += 1
    n = width * height
    if maxval > 255:
        raw = np.frombuffer(data, dtype=">u2", count=min(n, (len(data) - pos) // 2), offset=pos)
    else:
        raw = np.frombuffer(data, dtype=np.uint8, count=min(n, len(data) - pos), offset=pos)
    if raw.size < n:
        raise TruncatedData(f"expected {n} pixels, got {raw.size}")
    pixels = raw.astype(np.float32).reshape(height, width) / np.float32(maxval)
    return GrayImage(pixels)


def save_pgm(img: GrayImage) -> bytes:
    """Encode as 8-bit binary PGM with canonical single-space header."""
    quant = np.rint(img.pixels * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + quant.tobytes()


def save_mask_pgm(mask: BinaryMask) -> bytes:
    """Encode a mask as a 0/255 binary PGM."""
    return save_pgm(GrayImage(mask.pixels.astype(np.float32)))


def load_mask_pgm(data: bytes) -> BinaryMask:
    """Decode a 0/255 PGM back into a mask (any intensity >= 0.5 is true)."""
    return BinaryMask(load_pgm(data).pixels >= 0.5)


def threshold(img: GrayImage, t: float) -> BinaryMask:
    """Mask true exactly where intensity >= t (t=0 marks everything)."""
    return BinaryMask(img.pixels >= np.float32(t))


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float32)


def sobel(img: GrayImage) -> GradientField:
    """3x3 Sobel gradients with replicate-padded borders.

    x grows rightward (columns), y grows downward (rows); direction is
    atan2(gy, gx) and set to 0 where the magnitude vanishes.
    """
    if img.height < 3 or img.width < 3:
        raise ImageTooSmall(f"sobel needs >=3x3, got {img.height}x{img.width}")
    padded = np.pad(img.pixels, 1, mode="edge").astype(np.float32)
    gx = np.zeros_like(img.pixels)
    gy = np.zeros_like(img.pixels)
    h, w = img.pixels.shape
    for dy in range(3):
        for dx in range(3):
            window = padded[dy:dy + h, dx:dx + w]
            if _SOBEL_X[dy, dx]:
                gx += _SOBEL_X[dy, dx] * window
            if _SOBEL_Y[dy, dx]:
                gy += _SOBEL_Y[dy, dx] * window
    magnitude = np.sqrt(gx * gx + gy * gy)
    direction = np.arctan2(gy, gx)
    direction[magnitude == 0] = 0.0
    return GradientField(magnitude=magnitude, direction=direction)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def label_mask(mask: BinaryMask) -> tuple[np.ndarray, int]:
    """8-connectivity label array (0 = background) and the component count."""
    labels, n = ndimage.label(mask.pixels, structure=_EIGHT_CONNECTED)
    return labels, int(n)


def connected_components(mask: BinaryMask, intensity: GrayImage | None = None) -> list[Region]:
    """Label the mask with 8-connectivity and return regions, largest first.

    Ties in area break by label id so the ordering is deterministic.
    """
    if intensity is not None and intensity.pixels.shape != mask.pixels.shape:
        raise DimensionMismatch(
            f"mask {mask.pixels.shape} vs intensity {intensity.pixels.shape}")
    labels, n = label_mask(mask)
    if n == 0:
        return []
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)
    ys, xs = np.nonzero(mask.pixels)
    lab_at = labels[ys, xs]
    sum_x = np.bincount(lab_at, weights=xs, minlength=n + 1)
    sum_y = np.bincount(lab_at, weights=ys, minlength=n + 1)
    if intensity is not None:
        sum_i = np.bincount(lab_at, weights=intensity.pixels[ys, xs], minlength=n + 1)
    regions = []
    slices = ndimage.find_objects(labels)
    for lab in range(1, n + 1):
        area = int(areas[lab])
        sl_y, sl_x = slices[lab - 1]
        regions.append(Region(
            label=lab,
            area=area,
            centroid=(float(sum_x[lab] / area), float(sum_y[lab] / area)),
            bbox=(sl_x.start, sl_y.start, sl_x.stop, sl_y.stop),
            mean_intensity=float(sum_i[lab] / area) if intensity is not None else None,
        ))
    regions.sort(key=lambda r: (-r.area, r.label))
    return regions
