"""Sparse polynomial transition learning for state-space models."""

from . import autodiff, config, experiments, filtering, metrics, optimizer, polymodel, systems
from .errors import ConfigError, DegeneracyError, DomainError, SimulationError, UsageError

__all__ = [
    "autodiff",
    "config",
    "experiments",
    "filtering",
    "metrics",
    "optimizer",
    "polymodel",
    "systems",
    "ConfigError",
    "DegeneracyError",
    "DomainError",
    "SimulationError",
    "UsageError",
]
