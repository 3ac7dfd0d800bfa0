"""Exception hierarchy shared by every unirec module.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class UniRecError(Exception):
    exit_code = 1


class UsageError(UniRecError):
    exit_code = 2


class InputError(UniRecError, ValueError):
    """Malformed user-supplied data (bad token ids, unparsable rows)."""

    exit_code = 7


class ConfigurationError(UniRecError, ValueError):
    exit_code = 4


class DimensionError(UniRecError, ValueError):
    exit_code = 4


class NumericError(UniRecError, ArithmeticError):
    exit_code = 5


class CompatibilityError(UniRecError):
    """Checkpoint cannot be loaded: wrong magic, version, hash or truncated."""

    exit_code = 6


IO_EXIT_CODE = 3
