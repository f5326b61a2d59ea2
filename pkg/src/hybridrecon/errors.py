"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in a computation."""

    def __init__(self, message: str, ray_id: int | None = None):
        if ray_id is not None:
            message = f"{message} (ray {ray_id})"
        super().__init__(message)
        self.ray_id = ray_id


class TapeUsageError(RuntimeError):
    """A tape was used incorrectly, e.g. mixing values from two tapes."""


class DegenerateNormalError(ValueError):
    """The SDF gradient vanished so no normal can be formed."""


class ConfigError(ValueError):
    """Invalid run configuration. ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
