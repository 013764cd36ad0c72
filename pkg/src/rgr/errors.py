"""Exception types raised across the package."""


class RgrError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RgrError, ValueError):
    pass


class InvalidData(RgrError, ValueError):
    pass


class DegenerateInput(RgrError, ValueError):
    pass


class InvalidGrid(RgrError, ValueError):
    """Raised when a moving grid has non-positive cell volumes."""


class NumericalFailure(RgrError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""

    def __init__(self, message, step=None, parameter=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter


class Infeasible(RgrError):
    """No iterate satisfying the volume constraints was found."""


class InfeasibleExtension(Infeasible):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IllConditioned(RgrError, ArithmeticError):
    pass
