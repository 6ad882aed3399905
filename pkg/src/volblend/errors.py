"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
SolverError -> 3, FormatError (and OSError) -> 4.
"""


class VolblendError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(VolblendError):
    """A mesh, model, or fit violates a structural invariant."""


class SolverError(VolblendError):
    """The projective-dynamics solver diverged or was misconfigured."""


class FormatError(VolblendError):
    """A file could not be parsed or written in the declared format."""
