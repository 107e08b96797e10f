"""Scenarios, training/evaluation runners, metrics, and plot emission."""

from .scenario import ScenarioSpec, load_scenario, validate_scenario
from .metrics import MetricsReport, cdf, estimation_accuracy, convergence_times, peak_rtt
from .runner import compare_reports, evaluate, train

__all__ = [
    "MetricsReport",
    "ScenarioSpec",
    "cdf",
    "compare_reports",
    "convergence_times",
    "estimation_accuracy",
    "evaluate",
    "load_scenario",
    "peak_rtt",
    "train",
    "validate_scenario",
]
