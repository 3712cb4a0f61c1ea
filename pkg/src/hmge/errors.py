"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: bad usage/configuration -> 1,
malformed data -> 2, numeric failure during compute -> 3.
"""


class HmgeError(Exception):
    """Base class for all package errors."""


class ConfigError(HmgeError):
    """Inconsistent or invalid configuration (bad flags, bad schedule, ...)."""


class DataFormatError(HmgeError):
    """Malformed dataset files or graph data violating model invariants."""


class NumericError(HmgeError):
    """Non-finite values or other numeric failures encountered mid-compute."""
