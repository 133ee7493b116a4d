"""
    berry_sim.errors
    ~~~~~~~~~~~~~~~~

    Exception hierarchy shared by every part of the simulator.
"""

from typing import Optional


class BerrySimError(Exception):
    """Base class for all errors raised by berry_sim."""


class ConfigurationError(BerrySimError, ValueError):
    """A configuration value is missing, unknown or out of range.

    When the value came from a config file, `line` holds the 1-based line
    of the offending key and is prepended to the message.
    """

    def __init__(self, message: str, line: Optional[int] = None, path=None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
        if line is not None:
            prefix = f"{prefix}{line}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)


class ShapeError(BerrySimError, ValueError):
    """Array or network dimensions do not line up."""


class UsageError(BerrySimError):
    """An operation was called in a state that does not allow it."""


class IntegrityError(BerrySimError):
    """Stored or supplied data is inconsistent (fault maps, checkpoints)."""


class GenerationError(BerrySimError):
    """A random environment could not be generated."""


class InfeasibilityError(BerrySimError):
    """A physical configuration cannot fly (e.g. thrust deficit)."""


class TrainingDivergedError(BerrySimError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""
