"""Exception types raised by the solver stack."""


class GPLHRError(Exception):
    """Base class for all errors raised by this package."""


class MatrixMarketError(GPLHRError, ValueError):
    """Malformed or unsupported Matrix Market input.

    ``lineno`` is the 1-based line of the offending input, or ``None``
    when the problem is not tied to a single line.
    """

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DimensionMismatchError(GPLHRError, ValueError):
    pass


class SingularPencilError(GPLHRError):
    """The pencil (or a projection of it) has an indeterminate eigenvalue.

    In practice this means the shift sits on an eigenvalue or the pencil
    itself is singular.
    """


class QZConvergenceError(GPLHRError):
    pass


class DeficientEigenvalueError(GPLHRError):
    """A defective eigenvalue prevents eigenvector extraction."""


class PreconditionerBuildError(GPLHRError):
    pass
