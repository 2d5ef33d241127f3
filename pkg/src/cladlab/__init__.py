"""Desk-scale class-incremental learning with class-aware disentanglement."""

from .config import ExperimentConfig, load_config
from .estimator import IncrementalClassifier
from .exceptions import (CladLabError, ConfigError, ConsistencyError, DegenerateVectorError,
                         DimensionError, FeasibilityError, FormatVersionError, NumericalError,
                         ParseError)

__version__ = "0.1.0"

__all__ = ["IncrementalClassifier", "ExperimentConfig", "load_config", "CladLabError",
           "ConfigError", "ConsistencyError", "DegenerateVectorError", "DimensionError",
           "FeasibilityError", "FormatVersionError", "NumericalError", "ParseError"]
