"""Exception types shared across the package.

The CLI maps these onto exit codes: ``UsageError`` -> 1, ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class EmbdistillError(Exception):
    """Base class for all package errors."""


class UsageError(EmbdistillError, ValueError):
    """Bad arguments or configuration."""


class DataError(EmbdistillError, ValueError):
    """Malformed, inconsistent or missing input data."""


class FormatError(DataError):
    """A file does not follow the expected on-disk layout."""


class CheckpointError(FormatError):
    """A checkpoint directory is incomplete, corrupted or incompatible."""


class NumericalError(EmbdistillError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""
