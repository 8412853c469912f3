"""Exception hierarchy shared across the pipeline.

Each class maps to a CLI exit code: UsageError -> 2, DataError -> 3,
NumericError -> 4.
"""


class KtraceError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class UsageError(KtraceError):
    """Bad flags, malformed configuration, missing inputs."""

    exit_code = 2


class DataError(KtraceError):
    """Input data violates a contract (missing columns, empty dataset, ...)."""

    exit_code = 3


class NumericError(KtraceError):
    """Optimization or numeric failure (non-finite loss, divergence)."""

    exit_code = 4
