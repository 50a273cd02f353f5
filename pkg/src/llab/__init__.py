"""Toy vision-transformer lab for fitting and probing linear operators on patch tokens."""

from .errors import (ConfigError, DataError, DegenerateInput, LabError, NumericalError,
                     ShapeError, SplitViolation)

__all__ = ["ConfigError", "DataError", "DegenerateInput", "LabError", "NumericalError",
           "ShapeError", "SplitViolation"]
__version__ = "0.1.0"
