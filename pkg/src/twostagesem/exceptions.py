"""Exception hierarchy used across the package."""


class SemError(Exception):
    """Base class for all package errors."""


class SpecError(SemError, ValueError):
    """Malformed model specification or parameter layout mismatch."""


class IdentificationError(SpecError):
    """Model specification violates an identification requirement."""


class DataError(SemError, ValueError):
    """Input data does not match the model (missing columns, missing cells)."""


class NumericalError(SemError, ArithmeticError):
    """Singular matrices, non-PSD implied covariance, overflow."""


class ConvergenceError(SemError, RuntimeError):
    """An iterative fit failed to converge."""
