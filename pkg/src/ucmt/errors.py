"""Exception types shared across the package."""


class UcmtError(Exception):
    """Base class for all package errors."""


class ConfigError(UcmtError, ValueError):
    """Invalid configuration (layer spec, method/mix combination, flags)."""


class ShapeError(UcmtError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class GeometryError(UcmtError, ValueError):
    """No region grid factorization divides the image dimensions."""


class PreconditionError(UcmtError, ValueError):
    """An operation precondition was violated by the caller."""


class ValidationError(UcmtError, ValueError):
    """Input data failed a numeric validity check (e.g. unnormalized probs)."""


class DivergenceError(UcmtError, ArithmeticError):
    """Training produced non-finite values; message names the offending tensor."""


class DataIOError(UcmtError, OSError):
    """Missing, corrupt or inconsistent dataset/checkpoint files."""
