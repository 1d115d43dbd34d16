"""Versioned prompt assets and the JSON renderings slotted into them."""

from __future__ import annotations

import hashlib
import json
import re
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable

from ..models import ApiSpec, ExecutionReport, ExecutionStep, Workflow

PROMPT_NAMES = (
    "proposer",
    "executor",
    "executor_task",
    "selector",
    "inverse",
    "judge",
    "filter",
    "query_gen",
    "writer",
    "agent_standard",
    "agent_react",
    "dfs_retry",
)

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")
_FENCE = re.compile(r"```json\n(.*?)\n```", re.S)


@lru_cache(maxsize=None)
def template(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt {name!r}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")


def render(name: str, **values: Any) -> str:
    """Fill ``{placeholder}`` slots; literal braces elsewhere in the text are left alone."""
    text = template(name)
    missing = sorted({m for m in _PLACEHOLDER.findall(text) if m not in values})
    if missing:
        raise KeyError(f"prompt {name!r} missing values for {missing}")
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), text)


def versions() -> dict[str, str]:
    return {n: hashlib.sha256(template(n).encode()).hexdigest()[:12] for n in PROMPT_NAMES}


def block(obj: Any) -> str:
    return "```json\n" + json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n```"


def blocks(text: str) -> list[Any]:
    """Every fenced JSON block in ``text``, decoded, in order."""
    return [json.loads(b) for b in _FENCE.findall(text)]


def step_view(step: ExecutionStep) -> dict[str, Any]:
    return {
        "ToolAgentAction": {"tool": step.api_id, "tool_input": dict(step.request.arguments)},
        "response": step.response.body,
        "status": step.response.status,
    }


def workflow_view(w: Workflow) -> dict[str, Any]:
    return {
        "chains": [
            {"chain_index": i, "steps": [step_view(s) for s in chain.steps]} for i, chain in enumerate(w.chains)
        ]
    }


def pool_view(apis: Iterable[ApiSpec]) -> list[dict[str, str]]:
    return [{"name": a.id, "description": a.description} for a in apis]


def api_view(api: ApiSpec) -> dict[str, Any]:
    return {
        "name": api.id,
        "description": api.description,
        "category": api.category,
        "params": [p.to_dict() for p in api.params],
    }


def report_view(index: int, rep: ExecutionReport) -> dict[str, Any]:
    return {
        "report_index": index,
        "api": rep.proposal.api_id,
        "instruction": rep.proposal.instruction,
        "success": rep.success,
        "justification": rep.justification,
        "successful_step": rep.successful_step_index,
        "steps": [step_view(s) for s in rep.history],
    }


def trace_view(steps: Iterable[ExecutionStep]) -> list[dict[str, Any]]:
    return [
        {"api_use_request": {"tool": s.api_id, "tool_input": dict(s.request.arguments)},
         "api_response": {"status": s.response.status, "body": s.response.body}}
        for s in steps
    ]


def plan_text(api: ApiSpec, instruction: str) -> str:
    return f"Use the API `{api.id}` ({api.description}). {instruction}".strip()
