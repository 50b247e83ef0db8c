"""Exception types raised across the package.

Every operational failure maps to one of these; callers that need to degrade
gracefully (per-frame tracking) catch ``OcutrackError``.
"""


class OcutrackError(Exception):
    """Base class for all package errors."""


# --- image I/O and raster ops ---

class MalformedHeader(OcutrackError):
    """PGM header is missing fields or has a bad magic number."""


class TruncatedData(OcutrackError):
    """PGM raster holds fewer pixels than the header promises."""


class ImageTooSmall(OcutrackError):
    """Image is below the minimum size an operation supports."""


class DimensionMismatch(OcutrackError):
    """Two rasters that must share dimensions do not."""


# --- tensor / layer ops ---

class ShapeMismatch(OcutrackError):
    """Tensor arguments have incompatible shapes."""


class OddDimension(OcutrackError):
    """Spatial extent must be even for 2x2 pooling."""


class CropImpossible(OcutrackError):
    """Center crop margin is negative or odd."""


# --- network assembly / persistence ---

class InfeasibleInput(OcutrackError):
    """Input size does not survive the valid-convolution shape recursion."""


class SizeMismatch(OcutrackError):
    """Image size does not match the model's configured input size."""


class EmptyDataset(OcutrackError):
    """Training requires at least one sample."""


class BadMagic(OcutrackError):
    """Weights blob does not start with the expected magic bytes."""


class VersionUnsupported(OcutrackError):
    """Weights blob version is not readable by this build."""


class ManifestMismatch(OcutrackError):
    """Weights payload does not match the shapes implied by its config."""


class TruncatedPayload(OcutrackError):
    """Weights payload ends before the parameter manifest is satisfied."""


# --- feature extraction / classical pipeline ---

class DegenerateInput(OcutrackError):
    """Point set cannot be fitted (collinear, or conic is not an ellipse)."""


class TooFewEdges(OcutrackError):
    """Ray casting found fewer than five usable edge points."""


class NoCenter(OcutrackError):
    """Radial symmetry voting found no gradients to vote with."""


# --- synthesis / geometry ---

class FeatureOutOfFrame(OcutrackError):
    """Scene parameters place the pupil or glint outside the image."""


class InsufficientData(OcutrackError):
    """Calibration needs at least two distinct swing angles."""


class DegenerateGeometry(OcutrackError):
    """Calibration fit collapsed (no resolvable rotation radius)."""
