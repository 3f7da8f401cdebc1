"""Exception and warning types raised across the package."""


class IFFError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(IFFError, ValueError):
    pass


class UnsupportedFamilyError(IFFError, ValueError):
    pass


class DegenerateInputError(IFFError, ValueError):
    pass


class DegenerateSpectrumError(IFFError, ValueError):
    pass


class DegenerateTailError(IFFError, ValueError):
    pass


class NumericalFailure(IFFError, ArithmeticError):
    pass


class StaleCacheError(IFFError):
    """Stored summary digest does not match the inputs it is loaded for."""


class FormatError(IFFError, ValueError):
    """A file could not be parsed."""


class CacheFormatError(FormatError):
    pass


class SchemaError(IFFError, ValueError):
    pass


class ConfigError(IFFError, ValueError):
    pass


class TruncationWarning(UserWarning):
    """Kernel samples did not decay enough before the edge of the lag grid."""


class NegativeTraceWarning(UserWarning):
    """The approximate trace term came out negative (midpoint overshoot)."""
