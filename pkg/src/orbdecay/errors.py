"""Exception hierarchy shared across the package.

Three branches map onto the CLI exit codes: bad input data (2), numerical
failures (3), and bad configuration (4). Module-specific exceptions subclass
one of these so command wrappers can translate uniformly.
"""


class OrbdecayError(Exception):
    """Base class for all package errors."""


class InputError(OrbdecayError):
    """Malformed or inconsistent input data."""


class NumericalError(OrbdecayError):
    """A numerical procedure failed (non-convergence, non-finite values)."""


class ConfigError(OrbdecayError):
    """Invalid configuration values."""
