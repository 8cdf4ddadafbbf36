"""Exception types raised across the package."""


class GradSdfError(Exception):
    """Base class for all package errors."""


class MedialPointError(GradSdfError, ValueError):
    """The SDF gradient is undefined because the nearest surface point is not unique."""


class EmptyFrameError(GradSdfError):
    """A sensor pose produced no surface hits."""


class OutOfBoundsError(GradSdfError, ValueError):
    """A query point lies outside the octree root box."""


class SceneError(GradSdfError, ValueError):
    """Invalid scene description."""


class ConfigError(GradSdfError, ValueError):
    """Invalid run configuration."""


class NonFiniteLossError(GradSdfError, FloatingPointError):
    """A training step produced a NaN or infinite loss."""


class EmptyMeshError(GradSdfError):
    """The field has no zero crossing inside the extraction grid."""


class CheckpointError(GradSdfError):
    """Bad magic, version, or truncated checkpoint data."""


class ShapeMismatchError(GradSdfError, ValueError):
    """Cached activations do not match the upstream gradient."""
