"""Discrete-event grid simulator."""

from .engine import InvariantViolation, Simulation, SimTrace, UnknownTarget, run_simulation
from .generate import GeneratorConfig, crash_faults, generate_scenario
from .scenario import (
    DanglingReference, FaultConfig, Scenario, ScenarioError, load_scenario,
    parse_scenario_text, scenario_from_dict, scenario_to_dict,
)

__all__ = [
    "DanglingReference", "FaultConfig", "GeneratorConfig", "InvariantViolation", "Scenario",
    "ScenarioError", "SimTrace", "Simulation", "UnknownTarget", "crash_faults",
    "generate_scenario", "load_scenario", "parse_scenario_text", "run_simulation",
    "scenario_from_dict", "scenario_to_dict",
]
