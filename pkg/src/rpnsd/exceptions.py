"""Exception hierarchy for rpnsd."""


class RPNSDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RPNSDError, ValueError):
    """Tensor or array extents do not fit the operation."""


class NonFiniteError(RPNSDError, FloatingPointError):
    """A forward or loss computation produced NaN or Inf."""


class ConfigError(RPNSDError, ValueError):
    """Inconsistent or malformed configuration."""


class CheckpointError(RPNSDError):
    """Checkpoint file is corrupt, truncated or of the wrong version."""


class DataError(RPNSDError):
    """Malformed input data (RTTM, WAV, manifest...)."""


class ScoringError(RPNSDError, ValueError):
    """DER is undefined for the given inputs."""


class SimulationError(RPNSDError):
    """Mixture simulation could not satisfy its spec."""
