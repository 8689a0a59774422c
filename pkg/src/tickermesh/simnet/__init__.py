"""Deterministic discrete-event simulation of a broker mesh."""

from .report import MetricsReport, parse_records
from .runner import Simulation, run
from .scenario import Scenario, ScenarioError, ScenarioReferenceError, format_scenario, load_scenario
from .verify import Violation, verify

__all__ = [
    "MetricsReport",
    "Scenario",
    "ScenarioError",
    "ScenarioReferenceError",
    "Simulation",
    "Violation",
    "format_scenario",
    "load_scenario",
    "parse_records",
    "run",
    "verify",
]
