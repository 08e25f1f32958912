"""Exception hierarchy.

Every error raised on purpose by the package derives from `RefPriorError`, so
the CLI can map user mistakes and numerical red flags to distinct exit codes.
"""


class RefPriorError(Exception):
    """Base class for all package errors."""


class InputError(RefPriorError, ValueError):
    """Malformed user input: files, config values, array shapes."""


class ParameterDomainError(InputError):
    """A kernel or model parameter lies outside its admissible range."""


class UnsupportedKernelError(InputError):
    """The requested operation is not defined for this kernel family."""


class DesignError(InputError):
    """Design points are not pairwise distinct or otherwise unusable."""


class IdentifiabilityError(InputError):
    """Regression matrix H is rank deficient or p >= n."""


class NumericalError(RefPriorError, ArithmeticError):
    """A numerical contract was violated (not a user error)."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorisation failed.

    Carries the length scale and the offending pivot so callers can decide
    whether to retry in extended precision.
    """

    def __init__(self, message, theta=None, pivot=None, index=None):
        super().__init__(message)
        self.theta = theta
        self.pivot = pivot
        self.index = index


class NumericalConsistencyError(NumericalError):
    """A quantity that is nonnegative in exact arithmetic came out negative."""


class DegenerateObservationError(NumericalError):
    """The observation vector has no component outside the mean space."""


class QuadratureError(NumericalError):
    """Posterior normalisation did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AmbiguousRankError(NumericalError):
    """Eigenvalue gap too small to decide a rank or kernel dimension."""

    def __init__(self, message, gap_ratio=None):
        super().__init__(message)
        self.gap_ratio = gap_ratio


class LemmaViolation(NumericalError):
    """A bound that should hold for this kernel family was measured violated."""
