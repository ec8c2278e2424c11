"""Joint CTC/attention speech recognition and speech translation on numpy."""

from ._kernels import BACKEND
from .errors import (AlignmentError, ConfigError, ContractError, DataError, InitializationError,
                     IntegrityError, JcastError, NumericError, SearchSpaceError, ShapeError)

__version__ = "0.1.0"

__all__ = ["BACKEND", "AlignmentError", "ConfigError", "ContractError", "DataError",
           "InitializationError", "IntegrityError", "JcastError", "NumericError",
           "SearchSpaceError", "ShapeError", "__version__"]
