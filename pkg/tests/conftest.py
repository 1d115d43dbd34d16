from __future__ import annotations

from typing import Any, Iterable, Sequence

import pytest

from toolgrad.llm.backends import ScriptedBackend
from toolgrad.llm.gateway import Gateway
from toolgrad.llm.policies import cooperative_script
from toolgrad.models import ApiSpec, ExecutionStep, ParamSpec, ToolCallRequest, ToolResponse
from toolgrad.simdata import synthetic_apis
from toolgrad.tools import Registry, SimBehavior, SimEnvironment, SimProfile


def api(api_id: str, *params: str, description: str | None = None, name: str | None = None) -> ApiSpec:
    return ApiSpec(
        api_id,
        name or api_id,
        description if description is not None else f"{api_id.replace('_', ' ')} service with documented output",
        tuple(ParamSpec(p, "string", True, p) for p in params),
    )


def step(api_id: str, ok: bool = True, index: int = 0, **args: Any) -> ExecutionStep:
    resp = ToolResponse("success", {"v": api_id}, 5) if ok else ToolResponse("error", "boom", 5)
    return ExecutionStep(ToolCallRequest(api_id, args), resp, index)


def gateway(rules: Sequence[dict] = (), cooperative: bool = True, **kw: Any) -> Gateway:
    raw = list(rules) + (cooperative_script() if cooperative else [])
    return Gateway(ScriptedBackend.from_rules(raw), sleep=lambda s: None, **kw)


def sim(reg: Registry, unsolvable: Iterable[str] = (), failure_rate: float = 0.0, seed: int = 0) -> SimEnvironment:
    default = SimBehavior(failure_rate=failure_rate)
    dead = {i: SimBehavior(failure_rate=failure_rate, unsolvable=True) for i in unsolvable}
    return SimEnvironment(reg, SimProfile(dead, default), seed)


@pytest.fixture
def registry() -> Registry:
    return Registry.of(synthetic_apis(80, seed=3), "fixture")


@pytest.fixture
def coop() -> Gateway:
    return gateway()
