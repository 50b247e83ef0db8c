"""Pupil/glint image positions to gaze angles, with swing auto-calibration.

The geometric model rests on two assumptions about the rodent eye: the
pupil rotates about a fixed center, and the corneal surface is spherical,
so under coaxial illumination the glint tracks the projection of the
corneal curvature center. Under an orthographic camera rotated by ``phi``
about the vertical axis, the pupil-minus-glint image vector is then

    d = pixel_scale * Rp * (sin(theta_h - phi), -sin(theta_v))

(y grows downward in images, so an upward gaze gives negative dy). The
forward model (``project_eye``), the calibration fit (``calibrate``) and
the inverse (``gaze_angle``) all use exactly this relation, which makes
them self-consistent to rounding: projecting, calibrating from a swing and
inverting recovers the input gaze.

Because the glint cancels any common translation, gaze output depends only
on the difference vector - the reason the glint exists in this design.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometry, InsufficientData


@dataclass(frozen=True)
class EyeModel3D:
    """Eye geometry in millimeters plus its current gaze, for the oracle.

    ``rp`` is the distance from the corneal curvature center to the pupil
    plane; ``gaze`` is (theta_h, theta_v) in radians.
    """

    corneal_center: tuple[float, float, float]
    corneal_radius: float
    rp: float
    gaze: tuple[float, float]

    def __post_init__(self):
        if self.corneal_radius <= 0 or self.rp <= 0:
            raise ValueError("corneal_radius and rp must be positive")
        if max(abs(self.gaze[0]), abs(self.gaze[1])) >= math.pi / 2:
            raise ValueError("gaze angles must lie within (-pi/2, pi/2)")


@dataclass(frozen=True)
class CalibrationModel:
    """Effective pupil-rotation radius in pixels plus rest-axis offsets."""

    k: float
    theta0_h: float
    theta0_v: float
    fit_residual_px: float = 0.0
    n_measurements: int = 0

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")


@dataclass(frozen=True)
class SwingMeasurement:
    """One camera-swing observation: rig angle and pupil-minus-glint pixels."""

    phi: float
    dx: float
    dy: float

    def __post_init__(self):
        if abs(self.phi) > math.pi / 3:
            raise ValueError(f"swing angle {self.phi} outside rig range")


class GazeAngles(NamedTuple):
    theta_h: float
    theta_v: float
    clamped: bool


@dataclass(frozen=True)
class GazeSample:
    """Per-frame gaze result; angles are None when the frame is invalid."""

    frame_index: int
    theta_h: float | None
    theta_v: float | None
    features: object  # FrameFeatures
    valid: bool


def project_eye(model: EyeModel3D, camera_angle: float,
                pixel_scale: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Project the glint and pupil to pixels for a camera swung by phi.

    Orthographic projection along the camera axis rotated about the
    vertical axis through the scene; the glint is the projection of the
    corneal center, the pupil sits Rp away along the gaze direction.
    """
    cphi, sphi = math.cos(camera_angle), math.sin(camera_angle)

    def proj(px: float, py: float, pz: float) -> tuple[float, float]:
        return (pixel_scale * (px * cphi - pz * sphi), pixel_scale * py)

    x, y, z = model.corneal_center
    th, tv = model.gaze
    cr_px = proj(x, y, z)
    pupil_px = proj(x + model.rp * math.sin(th),
                    y - model.rp * math.sin(tv),
                    z + model.rp * math.cos(th))
    return pupil_px, cr_px


def calibrate(measurements: list[SwingMeasurement]) -> CalibrationModel:
    """Fit k and the rest-axis offsets from a camera swing.

    The horizontal model dx_i = k*sin(theta0_h - phi_i) becomes linear via
    u = k*sin(theta0_h), v = k*cos(theta0_h): dx_i = u*cos(phi_i) -
    v*sin(phi_i). The vertical offset comes from the mean dy, which the
    single-axis swing leaves constant.
    """
    if len(measurements) < 2:
        raise InsufficientData(f"need >= 2 measurements, got {len(measurements)}")
    phis = np.array([m.phi for m in measurements])
    if np.unique(phis).size < 2:
        raise InsufficientData("need measurements at >= 2 distinct swing angles")
    dxs = np.array([m.dx for m in measurements])
    dys = np.array([m.dy for m in measurements])
    design = np.column_stack([np.cos(phis), -np.sin(phis)])
    (u, v), *_ = np.linalg.lstsq(design, dxs, rcond=None)
    k = math.hypot(u, v)
    if k < 1e-9:
        raise DegenerateGeometry("fitted rotation radius is ~0; angle unresolvable")
    theta0_h = math.atan2(u, v)
    mean_dy = float(dys.mean())
    theta0_v = -math.asin(max(-1.0, min(1.0, mean_dy / k)))
    rx = dxs - design @ np.array([u, v])
    ry = dys - mean_dy
    residual = float(np.sqrt(np.mean(rx * rx + ry * ry)))
    return CalibrationModel(k=k, theta0_h=theta0_h, theta0_v=theta0_v,
                            fit_residual_px=residual, n_measurements=len(measurements))


def gaze_angle(calib: CalibrationModel, pupil: tuple[float, float],
               cr: tuple[float, float]) -> GazeAngles:
    """Invert the displacement model; out-of-range ratios clamp and flag."""
    dx = pupil[0] - cr[0]
    dy = pupil[1] - cr[1]
    rx = dx / calib.k
    ry = dy / calib.k
    clamped = abs(rx) > 1.0 or abs(ry) > 1.0
    theta_h = math.asin(max(-1.0, min(1.0, rx))) + calib.theta0_h
    theta_v = -math.asin(max(-1.0, min(1.0, ry))) + calib.theta0_v
    return GazeAngles(theta_h, theta_v, clamped)


def calibration_to_json(calib: CalibrationModel) -> str:
    doc = {
        "k_px": calib.k,
        "theta0_h_rad": calib.theta0_h,
        "theta0_v_rad": calib.theta0_v,
        "fit_residual_px": calib.fit_residual_px,
        "n_measurements": calib.n_measurements,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def calibration_from_json(text: str) -> CalibrationModel:
    doc = json.loads(text)
    return CalibrationModel(
        k=float(doc["k_px"]),
        theta0_h=float(doc["theta0_h_rad"]),
        theta0_v=float(doc["theta0_v_rad"]),
        fit_residual_px=float(doc.get("fit_residual_px", 0.0)),
        n_measurements=int(doc.get("n_measurements", 0)),
    )
