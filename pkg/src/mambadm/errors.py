"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class MambaDMError(Exception):
    exit_code = 1


class InvalidParameterError(MambaDMError, ValueError):
    """A numeric parameter is outside its admissible domain."""


class DomainError(InvalidParameterError):
    pass


class ShapeError(MambaDMError, ValueError):
    pass


class ConfigurationError(MambaDMError, ValueError):
    exit_code = 1


class DataError(MambaDMError, ValueError):
    exit_code = 2


class LoadError(DataError):
    pass


class UndefinedLossError(MambaDMError, ValueError):
    pass


class TrainingError(MambaDMError, RuntimeError):
    exit_code = 3
