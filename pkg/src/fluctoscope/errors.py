"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Input array shape or length does not match the operator geometry."""


class CapacityError(ValueError):
    """Requested problem size exceeds a supported dense-storage limit."""


class PreconditionError(ValueError):
    """An operation's documented precondition was violated."""


class UnsupportedRegularizerError(ValueError):
    """The requested regularizer kind is not valid for this operation."""


class SolverFailureError(RuntimeError):
    """An iterative solver diverged or failed structurally."""


class FlatDerivativeError(RuntimeError):
    """Newton root finding hit a (numerically) zero derivative."""
