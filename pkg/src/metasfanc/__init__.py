"""Meta-learned selective fixed-filter active noise control."""

from metasfanc.errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericError,
    SelectionError,
    WavFormatError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "NumericError",
    "SelectionError",
    "WavFormatError",
]
