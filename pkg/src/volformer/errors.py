"""Exception hierarchy shared by every volformer subsystem."""


class VolformerError(Exception):
    """Base class for all package errors."""


class ShapeError(VolformerError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(VolformerError, ValueError):
    """Invalid model, training or command-line configuration."""


class DataError(VolformerError):
    """Missing, empty or malformed dataset input."""


class NumericError(VolformerError, FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


class GraphError(VolformerError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, detached graph...)."""
