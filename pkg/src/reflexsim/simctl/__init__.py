"""Scenario configs, the simulation driver, ablations and the simctl CLI."""

from .config import ConfigError, ScenarioConfig, load, loads, validate
from .engine import build, run, to_json, write_report
from .experiments import ablate, check, pooled_latency
from .scenarios import BUILTINS, scenario_builtin
