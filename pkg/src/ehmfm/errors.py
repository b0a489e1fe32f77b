"""Exception types shared across the package.

The CLI maps these onto stable exit codes: validation problems exit
with 2, numerical failures with 3.
"""


class EhmfmError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(EhmfmError):
    """Bad inputs, malformed files, or inconsistent configuration."""


class NumericalError(EhmfmError):
    """Numerical failure during fitting (underflow, singular system, ...)."""
