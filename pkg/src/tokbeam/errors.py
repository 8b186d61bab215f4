"""Exception hierarchy shared across the package."""


class TokbeamError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TokbeamError, ValueError):
    """Invalid dimensions, counts or hyperparameters."""


class DimensionError(TokbeamError, ValueError):
    """Array shapes do not line up (channel vs beamformer, token widths...)."""


class RankError(TokbeamError, ValueError):
    """Channel matrix is not full row rank (zero-forcing impossible)."""


class DatasetError(TokbeamError):
    """Malformed, truncated or inconsistent dataset files."""


class CheckpointError(TokbeamError):
    """Malformed checkpoint or incompatible parameter shapes."""


class NonFiniteError(TokbeamError, FloatingPointError):
    """A tensor picked up NaN or Inf during a forward pass."""
