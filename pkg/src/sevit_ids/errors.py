"""Exception hierarchy shared by the library and the CLI.

Each family maps to a distinct process exit code (see ``cli``).
"""


class SevitError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class ConfigError(SevitError):
    """Bad configuration: invalid field values, unreadable config or schema."""

    exit_code = 3


class DataError(SevitError):
    """Malformed or unusable input data (CSV parse errors, empty classes...)."""

    exit_code = 4


class ShapeError(SevitError, ValueError):
    """Array shapes that do not fit together."""

    exit_code = 5


class NumericError(SevitError, ArithmeticError):
    """A computation produced a non-finite value where one is not allowed."""

    exit_code = 6
