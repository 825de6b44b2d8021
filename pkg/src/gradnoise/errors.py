"""Exception types shared across the package.

The CLI maps ConfigError (and subclasses) to exit code 2 and every other
GradnoiseError to exit code 3.
"""


class GradnoiseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GradnoiseError):
    """Invalid configuration: bad sizes, unknown keys, violated preconditions."""


class CapabilityError(ConfigError):
    """An operation was requested that the given problem/config cannot provide."""


class InvalidInputError(GradnoiseError):
    """Malformed numeric input, e.g. non-finite matrix entries."""


class DomainError(GradnoiseError):
    """Math domain violation, e.g. log of a nonpositive diagonal entry."""


class NumericalError(GradnoiseError):
    """A numerical routine failed (eigensolver, CG, singular system)."""


class StabilityError(NumericalError):
    """Edge-of-stability failure: some Hessian eigenvalue reaches or exceeds 2/eta.

    Carries the offending eigenvalue so callers can report it.
    """

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
