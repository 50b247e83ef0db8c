"""Deterministic synthetic rodent-eye scenes with exact ground truth.

A scene is painted back to front: fur background, iris disk, pupil ellipse
(foreshortened by gaze eccentricity), glint disk, bright hair streaks in
the fur, a linear illumination ramp, then Gaussian noise. Pupil and glint
positions come from the same projection used for gaze recovery, so every
sample's truth record is exactly invertible by an exact calibration.

Boundary discretization rule for the truth masks: a pixel belongs to a
feature mask iff its coverage by the ideal shape is >= 0.5, computed by
4x4 supersampling. Masks reflect the scene before hairs, gradient and
noise are applied.

All randomness flows from explicit seeds; a dataset regenerated from the
same master seed is byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import FeatureOutOfFrame
from .featext import EllipseParams
from .gaze import EyeModel3D, project_eye
from .imagekit import BinaryMask, GrayImage, load_mask_pgm, load_pgm, save_mask_pgm, save_pgm

_SUB = np.array([-0.375, -0.125, 0.125, 0.375])


@dataclass(frozen=True)
class SceneParams:
    image_size: tuple[int, int]  # (H, W)
    eye: EyeModel3D
    camera_angle: float
    pixel_scale: float  # px / mm
    pupil_radius: float  # px, before foreshortening
    cr_radius: float
    iris_radius: float
    background_level: float
    iris_level: float
    pupil_level: float
    cr_level: float
    n_hairs: int
    hair_brightness: float
    noise_sigma: float
    illum_gradient: float  # intensity per px
    rng_seed: int

    def __post_init__(self):
        levels = (self.background_level, self.iris_level, self.pupil_level,
                  self.cr_level, self.hair_brightness)
        if any(not 0.0 <= v <= 1.0 for v in levels):
            raise ValueError("intensity levels must lie in [0, 1]")
        if not self.pupil_level < self.iris_level < self.cr_level:
            raise ValueError("need pupil_level < iris_level < cr_level")
        if min(self.pupil_radius, self.cr_radius, self.iris_radius) <= 0:
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class SceneTruth:
    pupil_center: tuple[float, float]
    pupil_ellipse: EllipseParams
    cr_center: tuple[float, float]
    gaze: tuple[float, float]
    k_px: float


@dataclass(frozen=True)
class SynthSample:
    image: GrayImage
    pupil_mask: BinaryMask
    cr_mask: BinaryMask
    truth: SceneTruth


@dataclass(frozen=True)
class SceneDistribution:
    """Uniform ranges the dataset generator draws scene parameters from."""

    image_size: tuple[int, int] = (108, 108)
    rp_mm: tuple[float, float] = (1.1, 1.3)
    pixel_scale: tuple[float, float] = (28.0, 32.0)
    gaze_deg: float = 30.0
    pupil_radius: tuple[float, float] = (7.0, 13.0)
    cr_radius: tuple[float, float] = (2.5, 4.5)
    iris_radius: tuple[float, float] = (38.0, 44.0)
    background_level: tuple[float, float] = (0.25, 0.40)
    iris_level: tuple[float, float] = (0.45, 0.60)
    pupil_level: tuple[float, float] = (0.03, 0.12)
    cr_level: tuple[float, float] = (0.95, 1.0)
    n_hairs: tuple[int, int] = (3, 8)
    hair_brightness: tuple[float, float] = (0.70, 0.85)
    noise_sigma: tuple[float, float] = (0.005, 0.02)
    illum_gradient: tuple[float, float] = (0.0, 0.001)


def centered_eye(image_size: tuple[int, int], pixel_scale: float, rp: float,
                 gaze: tuple[float, float], corneal_radius: float = 1.6) -> EyeModel3D:
    """Eye whose glint projects to the image center at zero swing."""
    h, w = image_size
    return EyeModel3D(
        corneal_center=(0.5 * w / pixel_scale, 0.5 * h / pixel_scale, 10.0),
        corneal_radius=corneal_radius,
        rp=rp,
        gaze=gaze,
    )


def _ellipse_coverage(h: int, w: int, center: tuple[float, float],
                      a: float, b: float, angle: float) -> np.ndarray:
    """Per-pixel coverage (0..1) of an ellipse, 4x4 supersampled in its bbox."""
    cov = np.zeros((h, w), dtype=np.float64)
    cx, cy = center
    r = max(a, b) + 1.0
    x0, x1 = max(0, int(math.floor(cx - r))), min(w - 1, int(math.ceil(cx + r)))
    y0, y1 = max(0, int(math.floor(cy - r))), min(h - 1, int(math.ceil(cy + r)))
    if x1 < x0 or y1 < y0:
        return cov
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    sx = (xs[:, None] + _SUB[None, :]).reshape(-1)  # (nx*4,)
    sy = (ys[:, None] + _SUB[None, :]).reshape(-1)
    ca, sa = math.cos(angle), math.sin(angle)
    dx = sx[None, :] - cx  # (1, nx*4)
    dy = sy[:, None] - cy  # (ny*4, 1)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0  # (ny*4, nx*4)
    ny, nx = ys.size, xs.size
    frac = inside.reshape(ny, 4, nx, 4).mean(axis=(1, 3))
    cov[y0:y1 + 1, x0:x1 + 1] = frac
    return cov


def _segment_coverage(h: int, w: int, p0: np.ndarray, p1: np.ndarray,
                      half_width: float) -> np.ndarray:
    """Approximate anti-aliased coverage of a thick line segment."""
    cov = np.zeros((h, w), dtype=np.float64)
    lo = np.floor(np.minimum(p0, p1) - half_width - 1).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + half_width + 1).astype(int)
    x0, y0 = max(0, lo[0]), max(0, lo[1])
    x1, y1 = min(w - 1, hi[0]), min(h - 1, hi[1])
    if x1 < x0 or y1 < y0:
        return cov
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    seg = p1 - p0
    seg_len2 = float(seg @ seg)
    if seg_len2 == 0:
        dist = np.hypot(gx - p0[0], gy - p0[1])
    else:
        t = ((gx - p0[0]) * seg[0] + (gy - p0[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(gx - (p0[0] + t * seg[0]), gy - (p0[1] + t * seg[1]))
    cov[y0:y1 + 1, x0:x1 + 1] = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    return cov


def _segment_point_distance(p0: np.ndarray, p1: np.ndarray, q: np.ndarray) -> float:
    seg = p1 - p0
    seg_len2 = float(seg @ seg)
    if seg_len2 == 0:
        return float(np.hypot(*(q - p0)))
    t = max(0.0, min(1.0, float((q - p0) @ seg) / seg_len2))
    return float(np.hypot(*(q - (p0 + t * seg))))


def apparent_pupil(params: SceneParams) -> EllipseParams:
    """Foreshortened pupil ellipse: minor axis shrinks with gaze eccentricity."""
    pupil_px, cr_px = project_eye(params.eye, params.camera_angle, params.pixel_scale)
    th, tv = params.eye.gaze
    sh = math.sin(th - params.camera_angle)
    sv = math.sin(tv)
    s = min(0.999, math.hypot(sh, sv))
    fore = math.sqrt(1.0 - s * s)
    a = params.pupil_radius
    b = params.pupil_radius * fore
    if s < 1e-12:
        angle = 0.0
    else:
        # displacement direction in image coords; major axis is perpendicular
        angle = (math.atan2(-sv, sh) + math.pi / 2.0) % math.pi
    return EllipseParams(center=pupil_px, a=a, b=max(b, 1e-6), angle=angle)


def render_eye(params: SceneParams) -> SynthSample:
    """Render one scene; raises FeatureOutOfFrame if pupil or glint poke out."""
    h, w = params.image_size
    pupil_px, cr_px = project_eye(params.eye, params.camera_angle, params.pixel_scale)
    ellipse = apparent_pupil(params)
    margin = params.pupil_radius + 1.0
    if not (margin <= pupil_px[0] <= w - 1 - margin
            and margin <= pupil_px[1] <= h - 1 - margin):
        raise FeatureOutOfFrame(f"pupil at {pupil_px} with radius {params.pupil_radius}")
    cmargin = params.cr_radius + 1.0
    if not (cmargin <= cr_px[0] <= w - 1 - cmargin
            and cmargin <= cr_px[1] <= h - 1 - cmargin):
        raise FeatureOutOfFrame(f"glint at {cr_px} with radius {params.cr_radius}")

    rng = np.random.Generator(np.random.PCG64(params.rng_seed))
    img = np.full((h, w), params.background_level, dtype=np.float64)

    cov_iris = _ellipse_coverage(h, w, cr_px, params.iris_radius, params.iris_radius, 0.0)
    img = img * (1.0 - cov_iris) + params.iris_level * cov_iris

    cov_pupil = _ellipse_coverage(h, w, ellipse.center, ellipse.a, ellipse.b, ellipse.angle)
    img = img * (1.0 - cov_pupil) + params.pupil_level * cov_pupil
    pupil_mask = cov_pupil >= 0.5

    cov_cr = _ellipse_coverage(h, w, cr_px, params.cr_radius, params.cr_radius, 0.0)
    img = img * (1.0 - cov_cr) + params.cr_level * cov_cr
    cr_mask = cov_cr >= 0.5

    iris_c = np.array(cr_px)
    cr_c = np.array(cr_px)
    for _ in range(params.n_hairs):
        for _attempt in range(50):
            p0 = rng.uniform([0.0, 0.0], [w - 1.0, h - 1.0])
            length = rng.uniform(15.0, 45.0)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            p1 = p0 + length * np.array([math.cos(ang), math.sin(ang)])
            half_width = rng.uniform(0.5, 1.0)
            # hairs live in the fur: keep off the iris and the glint's
            # 2-radius neighborhood
            if _segment_point_distance(p0, p1, iris_c) <= params.iris_radius + 1.0:
                continue
            if _segment_point_distance(p0, p1, cr_c) <= 2.0 * params.cr_radius + half_width:
                continue
            cov = _segment_coverage(h, w, p0, p1, half_width)
            img = img * (1.0 - cov) + params.hair_brightness * cov
            break

    if params.illum_gradient != 0.0:
        omega = rng.uniform(0.0, 2.0 * math.pi)
        gx, gy = np.meshgrid(np.arange(w) - 0.5 * w, np.arange(h) - 0.5 * h)
        img = img + params.illum_gradient * (gx * math.cos(omega) + gy * math.sin(omega))
    if params.noise_sigma > 0.0:
        img = img + rng.normal(0.0, params.noise_sigma, size=(h, w))

    image = GrayImage(np.clip(img, 0.0, 1.0).astype(np.float32))
    truth = SceneTruth(
        pupil_center=pupil_px,
        pupil_ellipse=ellipse,
        cr_center=cr_px,
        gaze=params.eye.gaze,
        k_px=params.pixel_scale * params.eye.rp,
    )
    return SynthSample(image=image, pupil_mask=BinaryMask(pupil_mask),
                       cr_mask=BinaryMask(cr_mask), truth=truth)


def _draw_params(rng: np.random.Generator, dist: SceneDistribution) -> SceneParams:
    def u(rng_pair):
        lo, hi = rng_pair
        return float(rng.uniform(lo, hi))

    rp = u(dist.rp_mm)
    pixel_scale = u(dist.pixel_scale)
    lim = math.radians(dist.gaze_deg)
    gaze = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim)))
    return SceneParams(
        image_size=dist.image_size,
        eye=centered_eye(dist.image_size, pixel_scale, rp, gaze),
        camera_angle=0.0,
        pixel_scale=pixel_scale,
        pupil_radius=u(dist.pupil_radius),
        cr_radius=u(dist.cr_radius),
        iris_radius=u(dist.iris_radius),
        background_level=u(dist.background_level),
        iris_level=u(dist.iris_level),
        pupil_level=u(dist.pupil_level),
        cr_level=u(dist.cr_level),
        n_hairs=int(rng.integers(dist.n_hairs[0], dist.n_hairs[1] + 1)),
        hair_brightness=u(dist.hair_brightness),
        noise_sigma=u(dist.noise_sigma),
        illum_gradient=u(dist.illum_gradient),
        rng_seed=int(rng.integers(0, 2 ** 63)),
    )


def make_dataset(n: int, dist: SceneDistribution, master_seed: int) -> list[SynthSample]:
    """n samples with parameters drawn uniformly from the distribution ranges.

    Per-sample seeds derive from the master seed by counter, so any prefix
    of a dataset is independent of its total length. Out-of-frame draws are
    retried up to 10 times before giving up.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        last_exc = None
        for attempt in range(10):
            ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(i, attempt))
            rng = np.random.Generator(np.random.PCG64(ss))
            params = _draw_params(rng, dist)
            try:
                samples.append(render_eye(params))
                break
            except FeatureOutOfFrame as exc:
                last_exc = exc
        else:
            raise FeatureOutOfFrame(f"sample {i}: 10 retries exhausted: {last_exc}")
    return samples


def render_gaze_ramp(n: int, theta_h_range: tuple[float, float],
                     theta_v: float = 0.0, seed: int = 0,
                     dist: SceneDistribution | None = None) -> list[SynthSample]:
    """Frame sequence with fixed eye geometry and a linear horizontal sweep.

    Geometry parameters are pinned to their range midpoints so one exact
    calibration covers the whole sequence; only the gaze moves.
    """
    dist = dist or SceneDistribution()

    def mid(pair):
        return 0.5 * (pair[0] + pair[1])

    rp = mid(dist.rp_mm)
    pixel_scale = mid(dist.pixel_scale)
    thetas = np.linspace(theta_h_range[0], theta_h_range[1], n)
    samples = []
    for i, th in enumerate(thetas):
        params = SceneParams(
            image_size=dist.image_size,
            eye=centered_eye(dist.image_size, pixel_scale, rp, (float(th), theta_v)),
            camera_angle=0.0,
            pixel_scale=pixel_scale,
            pupil_radius=mid(dist.pupil_radius),
            cr_radius=mid(dist.cr_radius),
            iris_radius=mid(dist.iris_radius),
            background_level=mid(dist.background_level),
            iris_level=mid(dist.iris_level),
            pupil_level=mid(dist.pupil_level),
            cr_level=mid(dist.cr_level),
            n_hairs=int(mid(dist.n_hairs)),
            hair_brightness=mid(dist.hair_brightness),
            noise_sigma=mid(dist.noise_sigma),
            illum_gradient=0.0,
            rng_seed=int(np.random.SeedSequence(entropy=seed, spawn_key=(i,))
                         .generate_state(1)[0]),
        )
        samples.append(render_eye(params))
    return samples


# --- dataset directory layout ---

def _truth_doc(truth: SceneTruth) -> dict:
    return {
        "pupil_center": list(truth.pupil_center),
        "pupil_ellipse": {
            "center": list(truth.pupil_ellipse.center),
            "a": truth.pupil_ellipse.a,
            "b": truth.pupil_ellipse.b,
            "angle_rad": truth.pupil_ellipse.angle,
        },
        "cr_center": list(truth.cr_center),
        "gaze_rad": list(truth.gaze),
        "k_px": truth.k_px,
    }


def _truth_from_doc(doc: dict) -> SceneTruth:
    ell = doc["pupil_ellipse"]
    return SceneTruth(
        pupil_center=tuple(doc["pupil_center"]),
        pupil_ellipse=EllipseParams(center=tuple(ell["center"]), a=ell["a"],
                                    b=ell["b"], angle=ell["angle_rad"]),
        cr_center=tuple(doc["cr_center"]),
        gaze=tuple(doc["gaze_rad"]),
        k_px=doc["k_px"],
    )


def write_dataset(samples: list[SynthSample], out_dir: Path,
                  dist: SceneDistribution, master_seed: int) -> Path:
    """Write NNNN_{img,pupil,cr}.pgm + NNNN_truth.json plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        (out_dir / f"{stem}_img.pgm").write_bytes(save_pgm(s.image))
        (out_dir / f"{stem}_pupil.pgm").write_bytes(save_mask_pgm(s.pupil_mask))
        (out_dir / f"{stem}_cr.pgm").write_bytes(save_mask_pgm(s.cr_mask))
        (out_dir / f"{stem}_truth.json").write_text(
            json.dumps(_truth_doc(s.truth), sort_keys=True, indent=2) + "\n")
    manifest = {
        "n": len(samples),
        "master_seed": master_seed,
        "distribution": asdict(dist),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


@dataclass(frozen=True)
class DatasetRecord:
    image: GrayImage
    pupil_mask: BinaryMask
    cr_mask: BinaryMask
    truth: SceneTruth


def read_dataset(dir_path: Path) -> list[DatasetRecord]:
    """Load every sample of a dataset directory, in index order."""
    dir_path = Path(dir_path)
    records = []
    for img_path in sorted(dir_path.glob("[0-9][0-9][0-9][0-9]_img.pgm")):
        stem = img_path.name[:4]
        records.append(DatasetRecord(
            image=load_pgm(img_path.read_bytes()),
            pupil_mask=load_mask_pgm((dir_path / f"{stem}_pupil.pgm").read_bytes()),
            cr_mask=load_mask_pgm((dir_path / f"{stem}_cr.pgm").read_bytes()),
            truth=_truth_from_doc(json.loads((dir_path / f"{stem}_truth.json").read_text())),
        ))
    return records
