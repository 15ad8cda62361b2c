"""Connectivity-aware trajectory planning for multi-robot systems under uncertainty."""

from .belief import Belief, SystemModels
from .errors import (BarrierViolation, ConfigError, ConnplanError, DomainError, GradientUndefinedError,
                     InfeasibleMissionError, NumericalError, ProtocolError)
from .metric import ConnectivityConfig, EvalCounter, connectivity_metric
from .spectral import WeightedGraph, algebraic_connectivity

__version__ = "0.1.0"

__all__ = [
    "Belief", "SystemModels", "ConnectivityConfig", "EvalCounter", "connectivity_metric", "WeightedGraph",
    "algebraic_connectivity", "ConnplanError", "DomainError", "ConfigError", "NumericalError", "BarrierViolation",
    "GradientUndefinedError", "ProtocolError", "InfeasibleMissionError",
]
