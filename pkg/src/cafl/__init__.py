"""Simulator for over-the-air federated learning with heterogeneous channel coherence."""

from .config import ScenarioConfig
from .errors import (BoundPreconditionError, CaflError, CapacityExceeded, ConfigError, DecodeSingular,
                     HistoryTooShort, InfeasibleGeometry, NegativePilotPower, PowerBudgetExceeded)
from .harness import compare_schemes, run_scenario
from .learner import BoundConstants, Simulator, evaluate_bounds, local_sgd, measure_error_constants

__all__ = [
    "ScenarioConfig", "Simulator", "run_scenario", "compare_schemes", "local_sgd",
    "measure_error_constants", "evaluate_bounds", "BoundConstants",
    "CaflError", "ConfigError", "InfeasibleGeometry", "CapacityExceeded", "NegativePilotPower",
    "DecodeSingular", "PowerBudgetExceeded", "HistoryTooShort", "BoundPreconditionError",
]
__version__ = "0.1.0"
