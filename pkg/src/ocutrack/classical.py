"""Non-learning baseline: glint removal, symmetry voting, ray-cast pupil fit.

This reimplements the multi-stage image-processing pipeline the
segmentation networks replaced, as a comparison target: threshold out the
glint and in-paint it, vote for the rough pupil center with a fast
radial-symmetry transform, then refine with an iterative ray-casting
(Starburst-style) ellipse fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, NoCenter, OcutrackError, TooFewEdges
from .featext import EllipseParams, FrameFeatures, cr_candidates, extract_cr, fit_ellipse_points
from .imagekit import BinaryMask, GrayImage, label_mask, sobel, threshold


@dataclass(frozen=True)
class StarburstConfig:
    n_rays: int = 36
    max_radius: float = 40.0
    gradient_threshold: float = 0.5  # fraction of each ray's max derivative
    max_iterations: int = 5
    convergence_eps: float = 0.5  # px

    def __post_init__(self):
        if self.n_rays < 8:
            raise ValueError("n_rays must be >= 8")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


DEFAULT_RADII = (6.0, 8.0, 10.0, 12.0, 14.0, 16.0)
DEFAULT_CR_THRESHOLD = 0.9
DEFAULT_CR_AREA_RANGE = (2.0, 200.0)


def radial_symmetry_center(img: GrayImage, radii, polarity: str = "dark") -> tuple[float, float]:
    """Rough blob center by gradient voting at the given radii.

    Pixels with gradient magnitude above the 90th percentile each cast one
    vote r pixels along the gradient (against it for dark blobs); each
    radius's vote map is box-smoothed with width r/2 before summing.
    """
    if polarity not in ("dark", "bright"):
        raise ValueError(f"polarity must be dark or bright, got {polarity!r}")
    radii = list(radii)
    if not radii:
        raise ValueError("radii must be nonempty")
    grad = sobel(img)
    mag = grad.magnitude
    cutoff = float(np.percentile(mag, 90.0))
    sel = mag > cutoff
    if not sel.any():
        raise NoCenter("no gradients above the voting threshold")
    h, w = mag.shape
    ys, xs = np.nonzero(sel)
    ux = np.cos(grad.direction[sel])
    uy = np.sin(grad.direction[sel])
    sign = -1.0 if polarity == "dark" else 1.0
    accum = np.zeros((h, w), dtype=np.float64)
    for r in radii:
        vx = np.rint(xs + sign * r * ux).astype(int)
        vy = np.rint(ys + sign * r * uy).astype(int)
        ok = (vx >= 0) & (vx < w) & (vy >= 0) & (vy < h)
        votes = np.zeros((h, w), dtype=np.float64)
        np.add.at(votes, (vy[ok], vx[ok]), 1.0)
        size = max(1, int(round(r / 2.0)))
        accum += ndimage.uniform_filter(votes, size=size, mode="constant")
    iy, ix = np.unravel_index(int(accum.argmax()), accum.shape)
    return float(ix), float(iy)


def _bilinear(pixels: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    p00 = pixels[y0, x0]
    p01 = pixels[y0, x0 + 1]
    p10 = pixels[y0 + 1, x0]
    p11 = pixels[y0 + 1, x0 + 1]
    return (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
            + p10 * (1 - fx) * fy + p11 * fx * fy)


def starburst_pupil(img: GrayImage, seed_center: tuple[float, float],
                    cfg: StarburstConfig) -> tuple[EllipseParams, np.ndarray]:
    """Iterative ray-cast pupil boundary fit from a seed center.

    Each iteration casts n_rays; along each ray the first sample whose
    forward intensity derivative reaches gradient_threshold times that
    ray's maximum derivative (a dark-to-light onset) becomes an edge point.
    The collected points get an ellipse fit, the center moves there, and
    iteration stops once it moves less than convergence_eps.
    """
    h, w = img.pixels.shape
    if not (0 <= seed_center[0] <= w - 1 and 0 <= seed_center[1] <= h - 1):
        raise ValueError(f"seed {seed_center} outside image")
    pixels = img.pixels.astype(np.float64)
    angles = 2.0 * math.pi * np.arange(cfg.n_rays) / cfg.n_rays
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    center = np.array(seed_center, dtype=np.float64)
    ellipse = None
    points = np.empty((0, 2))
    for _ in range(cfg.max_iterations):
        collected = []
        for d in dirs:
            # longest in-frame sample count for this ray
            steps = int(cfg.max_radius)
            ts = np.arange(0, steps + 1, dtype=np.float64)
            px = center[0] + ts * d[0]
            py = center[1] + ts * d[1]
            inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
            n_in = int(inside.sum())
            if n_in < 2:
                continue
            vals = _bilinear(pixels, px[:n_in], py[:n_in])
            derivs = np.diff(vals)
            max_d = derivs.max()
            if max_d <= 1e-6:
                continue
            j = int(np.argmax(derivs >= cfg.gradient_threshold * max_d))
            t_edge = ts[j] + 0.5  # derivative j sits between samples j and j+1
            collected.append(center + t_edge * d)
        if len(collected) < 5:
            raise TooFewEdges(f"{len(collected)} edge points")
        points = np.array(collected)
        ellipse = fit_ellipse_points(points)
        new_center = np.array(ellipse.center)
        move = float(np.hypot(*(new_center - center)))
        center = new_center
        if move < cfg.convergence_eps:
            break
    return ellipse, points


def _inpaint_region(pixels: np.ndarray, region_mask: np.ndarray) -> np.ndarray:
    """Replace a blob with the median of the surrounding ring of pixels."""
    grown = ndimage.binary_dilation(region_mask, iterations=2)
    ring = ndimage.binary_dilation(grown, iterations=3) & ~grown
    out = pixels.copy()
    fill = np.median(pixels[ring]) if ring.any() else np.median(pixels)
    out[grown] = fill
    return out


def classical_pipeline(img: GrayImage,
                       cfg: StarburstConfig | None = None,
                       cr_threshold: float = DEFAULT_CR_THRESHOLD,
                       cr_area_range: tuple[float, float] = DEFAULT_CR_AREA_RANGE,
                       radii=DEFAULT_RADII) -> FrameFeatures:
    """Full baseline: glint first, in-paint it, then rough + refined pupil.

    Failures never raise; they degrade to absent features with zero
    confidence.
    """
    cfg = cfg or StarburstConfig()
    cr_point = None
    cr_conf = 0.0
    work = img
    bright = threshold(img, cr_threshold)
    found = extract_cr(bright, img, cr_area_range)
    if found is not None:
        cr_point, cr_conf = found
        # remove the glint so it cannot corrupt pupil edge detection
        best = cr_candidates(bright, img, cr_area_range)[0]
        labels, _ = label_mask(bright)
        work = GrayImage(np.clip(
            _inpaint_region(img.pixels, labels == best.label), 0.0, 1.0))

    pupil = None
    pupil_conf = 0.0
    try:
        rough = radial_symmetry_center(work, radii, polarity="dark")
        ellipse, points = starburst_pupil(work, rough, cfg)
        pupil = ellipse
        pupil_conf = min(1.0, len(points) / cfg.n_rays)
    except (NoCenter, TooFewEdges, DegenerateInput, OcutrackError, ValueError):
        pupil = None
        pupil_conf = 0.0
    return FrameFeatures(pupil=pupil, cr=cr_point, pupil_confidence=pupil_conf,
                         cr_confidence=cr_conf, source="classical")
