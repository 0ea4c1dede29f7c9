"""Asynchronous decentralized parallel SGD: reference algorithms, an event-driven
wall-clock simulator, convergence-theory calculators and an experiment harness."""

from .algorithms import run_logical
from .config import RunConfig, Setup, load, loads, resolve
from .errors import (
    AdpsgdError,
    ConfigError,
    DeadlockError,
    DivergenceError,
    ValidationError,
)
from .experiment import run_experiment, run_sweep
from .simulator import SpeedModel, detect_deadlock_freedom, simulate, simulate_synchronous, staleness_profile
from .topology import TopologyGraph, build_complete, build_ring, build_skip_ring

__version__ = "0.1.0"

__all__ = [
    "AdpsgdError",
    "ConfigError",
    "DeadlockError",
    "DivergenceError",
    "RunConfig",
    "Setup",
    "SpeedModel",
    "TopologyGraph",
    "ValidationError",
    "build_complete",
    "build_ring",
    "build_skip_ring",
    "detect_deadlock_freedom",
    "load",
    "loads",
    "resolve",
    "run_experiment",
    "run_logical",
    "run_sweep",
    "simulate",
    "simulate_synchronous",
    "staleness_profile",
]
