"""Exception hierarchy. Every error carries a machine-readable category for the CLI."""


class MixrankError(Exception):
    """Base class; `category` feeds the CLI exit code and error line."""

    category = "internal"


class ValidationError(MixrankError):
    """Malformed input: bad shapes, bad arguments, broken invariants."""

    category = "validation"


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class BundleFormatError(MixrankError):
    """Manifest or tensor file does not follow the bundle layout."""

    category = "io"


class SvdConvergenceError(MixrankError):
    category = "numeric"


class DivergenceError(MixrankError):
    """Gradient descent produced NaN/Inf loss."""

    category = "numeric"


class InfeasibleTargetError(MixrankError):
    """Requested compression factor cannot be met even at minimum ranks."""

    category = "infeasible"

    def __init__(self, message, achievable=None):
        super().__init__(message)
        self.achievable = achievable


EXIT_CODES = {
    "validation": 3,
    "infeasible": 4,
    "numeric": 5,
    "io": 6,
    "internal": 7,
}
