"""Exception hierarchy shared by every taskdenoise module."""


class TaskDenoiseError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TaskDenoiseError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(TaskDenoiseError):
    """A file on disk does not follow the expected binary layout."""


class IoError(TaskDenoiseError, OSError):
    """Reading or writing a file failed."""


class NumericalError(TaskDenoiseError, ArithmeticError):
    """A NaN or infinity appeared where a finite number was required."""


class ConvergenceError(TaskDenoiseError):
    """An iterative solver stopped before meeting its tolerance.

    Attributes
    ----------
    delta : float
        Convergence measure at the last iteration.
    n_iter : int
        Number of iterations performed.
    """

    def __init__(self, message, delta, n_iter):
        super().__init__(message)
        self.delta = float(delta)
        self.n_iter = int(n_iter)


class ExperimentError(TaskDenoiseError):
    """One or more folds of an experiment aborted in strict mode."""
