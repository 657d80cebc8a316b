"""Exception hierarchy shared by all modules.

Errors fall in three families that the CLI maps to exit codes: usage
problems, data/format problems and numeric failures.
"""


class ReslanError(Exception):
    """Base class for every error raised by this package."""


class DataError(ReslanError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class DecodeError(DataError):
    pass


class FormatError(DataError):
    pass


class DepthRangeError(DataError):
    """Depth value not representable in the 16-bit wire format."""


class ShapeError(DataError):
    pass


class UnsupportedError(DataError):
    pass


class InvalidMeasurementError(DataError):
    pass


class PresetError(DataError, LookupError):
    pass


class ConfigError(DataError):
    pass


class EmptyEvaluationError(DataError):
    pass


class InvalidPredictionError(DataError):
    pass


class NumericError(ReslanError, ArithmeticError):
    """Numeric failure: NaN output, divergence, failed gradient check (exit 3)."""


class DomainError(NumericError, ValueError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ContractError(ReslanError, RuntimeError):
    """API misuse such as a second backward pass over a consumed tape."""
