"""Data-driven dual-loop control of mixed vehicle platoons."""

from .data_engine import DataLog, load_log, save_log
from .dynamics import PlatoonScenario, default_scenario, load_scenario
from .exceptions import (
    CollisionError,
    DetectabilityWarning,
    Infeasible,
    NumericalFailure,
    PlatoonLabError,
    RankDeficient,
)
from .harness import (
    DriveCycle,
    ExperimentConfig,
    compute_metrics,
    export,
    load_drive_cycle,
    run_experiment,
    synthetic_aggressive_cycle,
)
from .inner_loop import DataDrivenStateFeedback, synthesize_inner
from .mpc import OffsetFreeMPC
from .observer import DisturbanceObserver, build_internal_model, synthesize_observer

__version__ = "0.1.0"

__all__ = [
    "CollisionError",
    "DataDrivenStateFeedback",
    "DataLog",
    "DetectabilityWarning",
    "DisturbanceObserver",
    "DriveCycle",
    "ExperimentConfig",
    "Infeasible",
    "NumericalFailure",
    "OffsetFreeMPC",
    "PlatoonLabError",
    "PlatoonScenario",
    "RankDeficient",
    "build_internal_model",
    "compute_metrics",
    "default_scenario",
    "export",
    "load_drive_cycle",
    "load_log",
    "load_scenario",
    "run_experiment",
    "save_log",
    "synthesize_inner",
    "synthesize_observer",
    "synthetic_aggressive_cycle",
]
