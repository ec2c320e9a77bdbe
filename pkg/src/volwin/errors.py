"""Exception types shared across the package."""


class VolwinError(Exception):
    """Base class for all package errors."""


class ShapeError(VolwinError):
    """Tensor extents are inconsistent with an operation's contract."""


class ConfigError(VolwinError):
    """An architectural or hyperparameter choice is invalid."""


class NumericError(VolwinError):
    """A forward computation produced NaN or Inf from finite inputs."""


class StateError(VolwinError):
    """Mutable state (running statistics, optimizer slots) is missing or inconsistent."""


class ContractError(VolwinError):
    """API misuse, e.g. backward from a non-scalar value."""


class CheckpointError(VolwinError):
    """A checkpoint file is malformed or does not match the model."""
