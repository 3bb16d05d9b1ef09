"""Numerical laboratory for exponential mixing of suspension semiflows over expanding Markov maps."""

from .config import ExperimentConfig
from .errors import (ConfigError, FitError, NormalizationError, NumericalError, PreconditionError,
                     ResourceError, SemiflowError, StructuralError)
from .phase_space import (MarkovMap, Roof, SystemConstants, make_map, make_roof, system_constants,
                          verify_assumptions)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "MarkovMap", "Roof", "SystemConstants", "make_map", "make_roof",
    "system_constants", "verify_assumptions", "SemiflowError", "ConfigError", "FitError",
    "NormalizationError", "NumericalError", "PreconditionError", "ResourceError", "StructuralError",
]
