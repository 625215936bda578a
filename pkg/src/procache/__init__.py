"""Constraint-aware caching schedules and selective computation on a toy DiT."""

from .errors import (
    ConfigError,
    InfeasibleSearchError,
    NumericError,
    ProCacheError,
    RunStateError,
    UndefinedMetricError,
)
from .evaluate import Simulator
from .metrics import FlopsReport, flops_estimate, relative_l1
from .pattern import (
    CachingPattern,
    ConstraintSet,
    SearchConfig,
    check_constraints,
    count_patterns,
    enumerate_patterns,
    sample_patterns,
    select_best_pattern,
)
from .schedule import ExecutionPlan, SelectiveConfig, StepAction, build_plan
from .tinydit import ModelConfig, TinyDiT, init_model

__version__ = "0.1.0"

__all__ = [
    "CachingPattern",
    "ConfigError",
    "ConstraintSet",
    "ExecutionPlan",
    "FlopsReport",
    "InfeasibleSearchError",
    "ModelConfig",
    "NumericError",
    "ProCacheError",
    "RunStateError",
    "SearchConfig",
    "SelectiveConfig",
    "Simulator",
    "StepAction",
    "TinyDiT",
    "UndefinedMetricError",
    "build_plan",
    "check_constraints",
    "count_patterns",
    "enumerate_patterns",
    "flops_estimate",
    "init_model",
    "relative_l1",
    "sample_patterns",
    "select_best_pattern",
]
