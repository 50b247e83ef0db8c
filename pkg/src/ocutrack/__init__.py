"""Rodent eye tracking toolkit.

Segmentation networks for pupil and corneal-reflection detection, a
classical image-processing baseline, geometric gaze recovery with swing
auto-calibration, and a synthetic scene generator that supplies training
data and exact ground truth.
"""

from .featext import EllipseParams, FrameFeatures
from .gaze import CalibrationModel, EyeModel3D, GazeSample, SwingMeasurement
from .imagekit import BinaryMask, GradientField, GrayImage, Region
from .synth import SceneDistribution, SceneParams, SynthSample
from .unet import TrainParams, TrainReport, UNetConfig, UNetModel

__all__ = [
    "BinaryMask",
    "CalibrationModel",
    "EllipseParams",
    "EyeModel3D",
    "FrameFeatures",
    "GazeSample",
    "GradientField",
    "GrayImage",
    "Region",
    "SceneDistribution",
    "SceneParams",
    "SwingMeasurement",
    "SynthSample",
    "TrainParams",
    "TrainReport",
    "UNetConfig",
    "UNetModel",
]

__version__ = "0.1.0"
