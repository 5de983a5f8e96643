"""Deterministic simulator for asynchronous edge learning with cloned distillation."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import ScenarioConfig, build_config, load_config, validate_config
from .errors import ConfigError, EdgeKDError, SimulationError
from .simulator import Simulator, run_simulation

__all__ = [
    "ConfigError",
    "EdgeKDError",
    "ScenarioConfig",
    "SimulationError",
    "Simulator",
    "__version__",
    "build_config",
    "load_config",
    "run_simulation",
    "validate_config",
]
