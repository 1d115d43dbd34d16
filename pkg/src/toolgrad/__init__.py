"""Answer-first generation of tool-use training data, with baselines and evaluation."""

from .engine import RunConfig, run_sample
from .models import (
    ApiSpec,
    Chain,
    CostLedger,
    ExecutionStep,
    ParamSpec,
    Sample,
    ToolCallRequest,
    ToolResponse,
    Workflow,
    sample_validate,
    workflow_add,
)
from .tools import Registry, SimEnvironment, load_registry

__all__ = [
    "ApiSpec",
    "Chain",
    "CostLedger",
    "ExecutionStep",
    "ParamSpec",
    "Registry",
    "RunConfig",
    "Sample",
    "SimEnvironment",
    "ToolCallRequest",
    "ToolResponse",
    "Workflow",
    "load_registry",
    "run_sample",
    "sample_validate",
    "workflow_add",
]
__version__ = "0.1.0"
