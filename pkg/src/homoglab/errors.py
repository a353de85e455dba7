"""Exception hierarchy shared by every module."""


class HomogLabError(Exception):
    """Base class for all library errors."""


class InvalidArgument(HomogLabError, ValueError):
    """Raised when an input violates a documented precondition."""


class SolverFailure(HomogLabError, RuntimeError):
    """A nonlinear or linear solve did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ExpansionFailure(HomogLabError, RuntimeError):
    """A corrector solve failed while assembling a two-scale expansion."""

    def __init__(self, message, cube=None):
        super().__init__(message)
        self.cube = cube
