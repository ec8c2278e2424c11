"""Exception types shared across the toolkit."""


class JcastError(Exception):
    """Base class for toolkit errors."""


class ShapeError(JcastError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(JcastError, ArithmeticError):
    """A NaN or otherwise invalid number appeared."""


class ContractError(JcastError, RuntimeError):
    """An API precondition was violated."""


class ConfigError(JcastError, ValueError):
    """Malformed or inconsistent configuration."""


class DataError(JcastError, ValueError):
    """Missing or malformed training/eval data."""


class IntegrityError(DataError):
    """On-disk data disagrees with its declared size or checksum."""


class AlignmentError(NumericError):
    """The input is too short for any CTC alignment of the target."""


class SearchSpaceError(JcastError, ValueError):
    """Exhaustive search refused because the space is too large."""


class InitializationError(JcastError, ValueError):
    """A checkpoint cannot initialize the requested model."""
