"""
Exception types raised across selseg.

The command line maps ConfigError to exit status 1 and every other
SelsegError to exit status 2.
"""


class SelsegError(Exception):
    """Base class of all selseg errors."""


class RejectedInputError(SelsegError, ValueError):
    """An operation received arguments outside its domain (shapes, ranges, indices)."""


class StateError(SelsegError, RuntimeError):
    """An operation ran against missing or inconsistent internal state."""


class ConfigError(SelsegError):
    """Settings file or command line flags are invalid."""


class DivergenceError(SelsegError, FloatingPointError):
    """A loss or gradient became non-finite during training."""
