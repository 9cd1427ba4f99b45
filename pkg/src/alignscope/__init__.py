"""Gradient-alignment diagnostics for MLPs trained at varying initialization scale."""
from .errors import (
    AlignscopeError,
    ConfigError,
    ConvergenceError,
    FormatError,
    InvalidParameterError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from .numkit import Rng

__version__ = "0.1.0"

__all__ = [
    "AlignscopeError",
    "ConfigError",
    "ConvergenceError",
    "FormatError",
    "InvalidParameterError",
    "NumericError",
    "Rng",
    "ShapeError",
    "UndefinedMetricError",
]
