"""Simulation harness: synthetic data, attacks, metrics, benchmarks."""

from .attacks import inject_attack
from .config import AttackSpec, ConfigError, RunConfig, load_config
from .datasets import gen_dataset
from .metrics import compute_metrics
from .runner import simulate, twin_runs

__all__ = ["AttackSpec", "ConfigError", "RunConfig", "compute_metrics", "gen_dataset", "inject_attack",
           "load_config", "simulate", "twin_runs"]
