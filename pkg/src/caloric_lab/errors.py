"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class corresponds to one
failure category rather than one call site.
"""


class LabError(Exception):
    """Base class for all errors raised by the lab."""


class UsageError(LabError, ValueError):
    """Bad arguments: wrong shapes, out-of-range parameters, unknown kinds."""


class ValidationError(LabError, ValueError):
    """Input data violates a structural invariant (measure, conductances, ...)."""


class PreconditionError(LabError):
    """A check was invoked outside the regime where it is meaningful."""


class NumericError(LabError, ArithmeticError):
    """A numerical routine failed to reach its tolerance.

    ``payload`` carries whatever partial result is still useful, e.g. the best
    feasible bound of an optimisation.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class ResourceError(LabError):
    """A configured size cap would be exceeded."""
