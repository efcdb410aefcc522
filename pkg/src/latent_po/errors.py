"""Exception types shared across the package."""


class LatentPOError(Exception):
    """Base class for all package errors."""


class NumericFault(LatentPOError, ArithmeticError):
    """Non-finite values or an invalid radicand appeared in a computation."""


class DegenerateInputError(LatentPOError, ValueError):
    """An input sits below the numeric floor (near-zero norm, vanishing alpha_bar, ...)."""


class DegenerateSamplingError(LatentPOError, RuntimeWarning):
    """Group sampling cannot produce distinct candidates (sigma == 0)."""


class UndefinedCorrelationError(LatentPOError, ValueError):
    """Pearson correlation requested for a constant series."""


class DivergenceError(LatentPOError, RuntimeError):
    """Training loss stayed far above its initial value for too long."""


class FormatError(LatentPOError, ValueError):
    """A checkpoint, dataset or config file is malformed or has the wrong version."""
