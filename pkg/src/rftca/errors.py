"""Exception and warning types shared across the package."""


class InvalidInputError(ValueError):
    """Input data violates a precondition (non-finite entries, zero matrix, ...)."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class SingularMatrixError(ArithmeticError):
    """A matrix required to be invertible is singular (or numerically so)."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance.

    Carries the last iterate so callers can inspect how far the solve got.
    """

    def __init__(self, message, last_estimate=None, residual=None):
        super().__init__(message)
        self.last_estimate = last_estimate
        self.residual = residual


class DataFormatError(ValueError):
    """A file could not be parsed; ``line`` / ``offset`` locate the defect."""

    def __init__(self, message, line=None, offset=None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration failed cross-field validation."""

    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class DegenerateSubspaceWarning(UserWarning):
    """The eigen-gap at the projection cut is (numerically) zero.

    The solve is still valid, but the retained subspace is not uniquely
    determined and perturbation guarantees are vacuous.
    """
