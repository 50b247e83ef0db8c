"""Binary masks to geometric features: pupil ellipse and glint point.

Two fitting routes live here. Region masks (dense interiors, as produced by
the networks) go through second central moments; sparse boundary point sets
(as produced by ray casting) go through a direct least-squares conic fit
with the ellipse constraint. Both return the same EllipseParams shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput
from .imagekit import BinaryMask, GrayImage, Region, connected_components, label_mask


@dataclass(frozen=True)
class EllipseParams:
    """center (x, y) sub-pixel; semi-axes a >= b > 0; angle in [0, pi).

    ``angle`` is measured from the +x axis to the major axis.
    """

    center: tuple[float, float]
    a: float
    b: float
    angle: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"semi-axes must satisfy a >= b > 0, got {self.a}, {self.b}")
        if not (0.0 <= self.angle < math.pi):
            raise ValueError(f"angle {self.angle} outside [0, pi)")


@dataclass(frozen=True)
class FrameFeatures:
    """Per-frame detections; a feature is absent iff its confidence is 0."""

    pupil: EllipseParams | None
    cr: tuple[float, float] | None
    pupil_confidence: float
    cr_confidence: float
    source: str  # "network" or "classical"

    def __post_init__(self):
        if (self.pupil is None) != (self.pupil_confidence == 0.0):
            raise ValueError("pupil presence must match nonzero confidence")
        if (self.cr is None) != (self.cr_confidence == 0.0):
            raise ValueError("cr presence must match nonzero confidence")


def _normalize_angle(angle: float) -> float:
    a = angle % math.pi
    return 0.0 if a >= math.pi or a < 0 else a


def moments_ellipse(xs: np.ndarray, ys: np.ndarray) -> EllipseParams:
    """Equivalent ellipse of a pixel set from its second central moments.

    The covariance gets a +1/12 diagonal correction for pixel extent, which
    keeps single-pixel regions non-degenerate and sharpens small blobs.
    Semi-axes are 2*sqrt(eigenvalue).
    """
    cx = float(xs.mean())
    cy = float(ys.mean())
    dx = xs - cx
    dy = ys - cy
    n = xs.size
    cov = np.array([
        [float(dx @ dx) / n + 1.0 / 12.0, float(dx @ dy) / n],
        [float(dx @ dy) / n, float(dy @ dy) / n + 1.0 / 12.0],
    ])
    evals, evecs = np.linalg.eigh(cov)  # ascending
    a = 2.0 * math.sqrt(max(evals[1], 0.0))
    b = 2.0 * math.sqrt(max(evals[0], 0.0))
    major = evecs[:, 1]
    angle = _normalize_angle(math.atan2(major[1], major[0]))
    return EllipseParams(center=(cx, cy), a=a, b=b, angle=angle)


def extract_pupil(mask: BinaryMask) -> tuple[EllipseParams, float] | None:
    """Moments ellipse of the largest component, or None for an empty mask.

    Confidence is (component area / total mask area) scaled by the fill
    ratio (component area / ellipse area, clamped to [0, 1]).
    """
    total = mask.area()
    if total == 0:
        return None
    labels, n = label_mask(mask)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    areas[0] = 0
    best = int(areas.argmax())
    ys, xs = np.nonzero(labels == best)
    ellipse = moments_ellipse(xs.astype(np.float64), ys.astype(np.float64))
    area = float(areas[best])
    fill = min(1.0, area / (math.pi * ellipse.a * ellipse.b))
    confidence = (area / total) * fill
    if confidence <= 0.0:
        return None
    return ellipse, confidence


def cr_candidates(mask: BinaryMask, image: GrayImage,
                  area_range: tuple[float, float]) -> list[Region]:
    """Components with area inside the range, brightest mean first."""
    lo, hi = area_range
    regions = [r for r in connected_components(mask, image) if lo <= r.area <= hi]
    regions.sort(key=lambda r: (-(r.mean_intensity or 0.0), r.label))
    return regions


def extract_cr(mask: BinaryMask, image: GrayImage,
               area_range: tuple[float, float]) -> tuple[tuple[float, float], float] | None:
    """Brightest in-range component's centroid, or None if no candidate.

    Confidence is the winner's mean intensity times its relative margin over
    the runner-up (1.0 when it is the only candidate).
    """
    cands = cr_candidates(mask, image, area_range)
    if not cands:
        return None
    best = cands[0]
    best_mean = best.mean_intensity or 0.0
    if len(cands) == 1:
        margin = 1.0
    else:
        second = cands[1].mean_intensity or 0.0
        margin = max(0.0, min(1.0, 1.0 - second / best_mean)) if best_mean > 0 else 0.0
    confidence = best_mean * margin
    if confidence <= 0.0:
        return None
    return best.centroid, confidence


def _conic_to_ellipse(coeffs: np.ndarray) -> EllipseParams:
    """Convert A x^2 + B xy + C y^2 + D x + E y + F = 0 to geometric form."""
    a_, b_, c_, d_, e_, f_ = (float(v) for v in coeffs)
    if b_ * b_ - 4.0 * a_ * c_ >= 0:
        raise DegenerateInput("conic is not an ellipse")
    if a_ + c_ < 0:
        a_, b_, c_, d_, e_, f_ = -a_, -b_, -c_, -d_, -e_, -f_
    m = np.array([[2.0 * a_, b_], [b_, 2.0 * c_]])
    cx, cy = np.linalg.solve(m, [-d_, -e_])
    fc = (a_ * cx * cx + b_ * cx * cy + c_ * cy * cy + d_ * cx + e_ * cy + f_)
    q = np.array([[a_, b_ / 2.0], [b_ / 2.0, c_]])
    evals, evecs = np.linalg.eigh(q)  # ascending, both positive here
    if evals[0] <= 0 or fc >= 0:
        raise DegenerateInput("conic is not a real ellipse")
    major = math.sqrt(-fc / evals[0])
    minor = math.sqrt(-fc / evals[1])
    vec = evecs[:, 0]
    angle = _normalize_angle(math.atan2(vec[1], vec[0]))
    return EllipseParams(center=(float(cx), float(cy)), a=major, b=minor, angle=angle)


def fit_ellipse_points(points) -> EllipseParams:
    """Direct least-squares ellipse fit (4AC - B^2 = 1 constraint class).

    Uses the numerically stable partitioned form of the constrained conic
    fit, after centering and isotropically scaling the points. Exact (to
    rounding) on noiseless points from a true ellipse; raises
    DegenerateInput for collinear sets or non-ellipse solutions.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 5:
        raise DegenerateInput(f"need >= 5 (x, y) points, got shape {pts.shape}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    scale = float(np.sqrt((centered ** 2).sum(axis=1).mean()))
    if scale <= 0:
        raise DegenerateInput("all points coincide")
    q = centered / scale
    x, y = q[:, 0], q[:, 1]
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise DegenerateInput("degenerate point configuration (collinear?)")
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise DegenerateInput("degenerate point configuration") from None
    if not np.isfinite(t).all():
        raise DegenerateInput("degenerate point configuration")
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    best = None
    for i in range(3):
        v = np.real(evecs[:, i])
        cond = 4.0 * v[0] * v[2] - v[1] * v[1]
        if cond > 0:
            best = v / math.sqrt(cond)
            break
    if best is None:
        raise DegenerateInput("no ellipse satisfies the constraint")
    conic_n = np.concatenate([best, t @ best])
    ellipse_n = _conic_to_ellipse(conic_n)
    return EllipseParams(
        center=(ellipse_n.center[0] * scale + mean[0],
                ellipse_n.center[1] * scale + mean[1]),
        a=ellipse_n.a * scale,
        b=ellipse_n.b * scale,
        angle=ellipse_n.angle,
    )
