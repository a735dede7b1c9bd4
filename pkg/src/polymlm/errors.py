"""Exception taxonomy shared by all modules.

Each class maps to a stable CLI exit code so batch pipelines can branch on
failure kind: config=2, data=3, numeric=4, protocol=5.
"""


class PolymlmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PolymlmError):
    """Invalid configuration, argument, or precondition violation."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor/array shape or dimension mismatch."""


class DataError(PolymlmError):
    """Missing, unreadable, or malformed input data."""

    exit_code = 3


class NumericError(PolymlmError):
    """Non-finite values or numerically undefined results."""

    exit_code = 4


class ProtocolError(PolymlmError):
    """Collective-communication ordering violation or deadlock."""

    exit_code = 5
