"""Event-based timeline simulator for hybrid-parallel (data x model x pipeline) DNN training."""

from .analysis import activity, batch_time, bubble_report, export_trace, stage_report
from .cost import CostTable, Policy, resolve
from .errors import SimError, SpecError, UnresolvedEventError
from .events import EventKey, EventSet, generate_events
from .ir import (
    ClusterSpec,
    LayerSpec,
    ModelSpec,
    PipelineAlgorithm,
    StrategyConfig,
    ValidatedPlan,
    parse_strategy,
    validate_plan,
)
from .modeler import Timeline
from .search import SearchSpace, grid_search
from .simulator import SimulationResult, simulate

__all__ = [
    "ClusterSpec", "CostTable", "EventKey", "EventSet", "LayerSpec", "ModelSpec",
    "PipelineAlgorithm", "Policy", "SearchSpace", "SimError", "SimulationResult",
    "SpecError", "StrategyConfig", "Timeline", "UnresolvedEventError", "ValidatedPlan",
    "activity", "batch_time", "bubble_report", "export_trace", "generate_events",
    "grid_search", "parse_strategy", "resolve", "simulate", "stage_report", "validate_plan",
]
