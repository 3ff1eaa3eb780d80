"""Exception hierarchy shared by all ordgam modules."""


class OrdgamError(Exception):
    """Base class for errors raised by ordgam."""


class SchemaError(OrdgamError, KeyError):
    """A required column could not be resolved through the schema."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ValidationError(OrdgamError, ValueError):
    """Input data violate a structural invariant."""


class ConvergenceError(OrdgamError, RuntimeError):
    """An iterative solver failed to converge.

    Carries the last iterate and a trace so callers can write diagnostics.
    """

    def __init__(self, message, iterate=None, trace=None):
        super().__init__(message)
        self.iterate = iterate
        self.trace = trace if trace is not None else []


class SingularHessianError(OrdgamError, ValueError):
    """A penalized Hessian is numerically singular."""


class SeparationWarning(UserWarning):
    """Fitted probabilities saturate, suggesting (quasi-)complete separation."""


class RidgeWarning(UserWarning):
    """A ridge term was added to stabilize an indefinite Hessian."""
