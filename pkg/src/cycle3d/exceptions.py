"""Exception types raised across the package."""


class Cycle3DError(Exception):
    """Base class for all package errors."""


class InvalidDepthError(Cycle3DError, ValueError):
    pass


class BehindCameraError(Cycle3DError, ValueError):
    pass


class DimensionError(Cycle3DError, ValueError):
    pass


class ConfigurationError(Cycle3DError, ValueError):
    pass


class TrainingDivergedError(Cycle3DError, FloatingPointError):
    pass


class SamplingDivergedError(Cycle3DError, FloatingPointError):
    pass


class FormatError(Cycle3DError, ValueError):
    """Malformed or unsupported file contents."""
