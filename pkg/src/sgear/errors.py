"""Exception hierarchy shared by all sgear modules."""


class SgearError(Exception):
    """Base class for all sgear errors."""


class ShapeError(SgearError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(SgearError, ValueError):
    """A configuration value is missing, inconsistent or unknown."""


class FormatError(SgearError, ValueError):
    """A binary or text file does not match its documented format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(SgearError, ValueError):
    """Dataset contents violate an invariant (bad labels, bad rows, ...)."""


class NumericError(SgearError, ArithmeticError):
    """A computation produced non-finite values."""


class EvalError(SgearError, ValueError):
    """Evaluation inputs are empty or misaligned."""
