"""Unified news recall and ranking: one user model serving both stages."""

from __future__ import annotations

from .errors import (
    CompatibilityError,
    ConfigurationError,
    DimensionError,
    InputError,
    NumericError,
    UniRecError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConfigurationError",
    "DimensionError",
    "InputError",
    "NumericError",
    "UniRecError",
    "UsageError",
    "__version__",
]
