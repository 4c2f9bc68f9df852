"""Exception taxonomy shared by all modules.

Each class maps to one CLI exit code (see `fscil.cli`), so callers can tell
bad arguments apart from corrupted files, broken run contracts, and numeric
failures.
"""


class FscilError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ArgumentError(FscilError, ValueError):
    """A caller passed values that violate an operation's preconditions."""

    exit_code = 2


class UsageError(FscilError, RuntimeError):
    """An operation was used in an unsupported way (wrong mode, impure fn)."""

    exit_code = 2


class DomainError(FscilError, ValueError):
    """Input is outside the mathematical domain (e.g. zero vector norm)."""

    exit_code = 2


class FormatError(FscilError, ValueError):
    """A file on disk does not match its declared format."""

    exit_code = 3


class ContractViolation(FscilError, RuntimeError):
    """A structural protocol rule was broken (frozen params, data access)."""

    exit_code = 4


class NumericError(FscilError, ArithmeticError):
    """A numeric routine cannot proceed (singular matrix, divergence)."""

    exit_code = 5
