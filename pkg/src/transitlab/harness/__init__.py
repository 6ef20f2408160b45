from .config import Config, ConfigError, variant_toggle
from .metrics import EmptyInput, LatencyRecord, breakdown_report, percentile
from .oracle import ShadowOracle
from .runner import ExperimentReport, System, run_experiment

__all__ = [
    "Config", "ConfigError", "variant_toggle", "EmptyInput", "LatencyRecord", "breakdown_report",
    "percentile", "ShadowOracle", "ExperimentReport", "System", "run_experiment",
]
