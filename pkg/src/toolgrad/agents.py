"""Inference drivers shared by the query-first baseline and the evaluation harness.

* standard: one model turn emits every tool call at once.
* ReAct: one tool call per turn, observation fed back, until ``finish``.
* DFS: ReAct states explored depth-first; a failed call, a duplicate state or
  a ``give_up`` sends the search back to try an alternative action.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts
from .llm.gateway import ChatMessage, Gateway, render_tool_response, system, user
from .models import ApiSpec, CostLedger, ExecutionStep, ParamSpec, ToolCallRequest, ToolResponse
from .tools import DEFAULT_TIMEOUT_MS, ToolEnvironment, UnknownApiError

log = logging.getLogger(__name__)

FINISH = ApiSpec(
    id="finish",
    name="finish",
    description="End the task. return_type is give_answer (with final_answer) or give_up to abandon the current path.",
    params=(
        ParamSpec("return_type", "string", True, "give_answer or give_up"),
        ParamSpec("final_answer", "string", False, "answer for the user"),
    ),
)


@dataclass
class AgentTrace:
    steps: list[ExecutionStep] = field(default_factory=list)
    final_answer: str = ""
    llm_calls: int = 0
    cap_exhausted: bool = False
    passed: bool = False
    path: list[ExecutionStep] = field(default_factory=list)


def _execute(
    call: ToolCallRequest, allowed: set[str], env: ToolEnvironment, ledger: CostLedger, timeout_ms: int, index: int
) -> ExecutionStep:
    req = ToolCallRequest(call.api_id, dict(call.arguments))
    if call.api_id not in allowed:
        return ExecutionStep(req, ToolResponse("error", f"unknown tool {call.api_id!r}"), index)
    try:
        resp = env.execute(req, timeout_ms, ledger)
    except UnknownApiError:
        resp = ToolResponse("error", f"unknown tool {call.api_id!r}")
    return ExecutionStep(req, resp, index)


def run_standard(
    query: str,
    tools: Sequence[ApiSpec],
    gateway: Gateway,
    env: ToolEnvironment,
    ledger: CostLedger,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> AgentTrace:
    trace = AgentTrace()
    messages = [system(prompts.template("agent_standard")), user(query)]
    reply = gateway.chat(messages, role="agent", ledger=ledger, tools=tools)
    trace.llm_calls = 1
    allowed = {t.id for t in tools}
    for call in reply.tool_calls:
        trace.steps.append(_execute(call, allowed, env, ledger, timeout_ms, len(trace.steps)))
    trace.final_answer = reply.content
    trace.passed = any(s.response.ok for s in trace.steps)
    return trace


def _finish_args(call: ToolCallRequest) -> tuple[str, str]:
    return str(call.arguments.get("return_type", "give_answer")), str(call.arguments.get("final_answer", ""))


def run_react(
    query: str,
    tools: Sequence[ApiSpec],
    gateway: Gateway,
    env: ToolEnvironment,
    ledger: CostLedger,
    cap: int = 10,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> AgentTrace:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    trace = AgentTrace()
    offered = list(tools) + [FINISH]
    allowed = {t.id for t in tools}
    messages: list[ChatMessage] = [system(prompts.template("agent_react")), user(query)]
    for _ in range(cap):
        reply = gateway.chat(messages, role="agent", ledger=ledger, tools=offered)
        trace.llm_calls += 1
        if not reply.tool_calls:
            trace.final_answer = reply.content
            break
        call = reply.tool_calls[0]
        if len(reply.tool_calls) > 1:
            log.warning("ReAct turn returned %d tool calls; using the first", len(reply.tool_calls))
        if call.api_id == FINISH.id:
            trace.final_answer = _finish_args(call)[1]
            break
        step = _execute(call, allowed, env, ledger, timeout_ms, len(trace.steps))
        trace.steps.append(step)
        messages.append(ChatMessage("assistant", reply.content, (call,)))
        messages.append(ChatMessage("tool", render_tool_response(step.response), tool_call_id=call.call_id or "call"))
    else:
        trace.cap_exhausted = True
    trace.path = list(trace.steps)
    trace.passed = any(s.response.ok for s in trace.steps)
    return trace


class _BudgetSpent(Exception):
    pass


def _state_digest(messages: Sequence[ChatMessage]) -> str:
    canon = [(m.role, m.content, [(c.api_id, json.dumps(dict(c.arguments), sort_keys=True)) for c in m.tool_calls])
             for m in messages]
    return hashlib.sha256(json.dumps(canon).encode()).hexdigest()


def run_dfs(
    query: str,
    tools: Sequence[ApiSpec],
    gateway: Gateway,
    env: ToolEnvironment,
    ledger: CostLedger,
    max_llm_calls: int = 30,
    max_depth: int = 6,
    max_alternatives: int = 2,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> AgentTrace:
    """Depth-first search over ReAct states.

    Success needs a model-declared answer on a path holding at least one
    successful call. Every model and tool call is billed, abandoned branches
    included. ``trace.steps`` lists all calls made; ``trace.path`` the
    successful path.
    """
    if max_llm_calls < 1 or max_depth < 1:
        raise ValueError("DFS budget must be positive")
    trace = AgentTrace()
    offered = list(tools) + [FINISH]
    allowed = {t.id for t in tools}
    root = [system(prompts.template("agent_react")), user(query)]
    visited = {_state_digest(root)}

    def ask(messages: list[ChatMessage]) -> ChatMessage:
        if trace.llm_calls >= max_llm_calls:
            raise _BudgetSpent
        trace.llm_calls += 1
        return gateway.chat(messages, role="agent", ledger=ledger, tools=offered)

    def expand(messages: list[ChatMessage], path: list[ExecutionStep]) -> bool:
        failed: list[dict] = []
        for _ in range(1 + max_alternatives):
            convo = messages
            if failed:
                convo = messages + [user(prompts.render("dfs_retry", failed_actions=prompts.block(failed)))]
            reply = ask(convo)
            call = reply.tool_calls[0] if reply.tool_calls else None
            if call is None or call.api_id == FINISH.id:
                kind, answer = _finish_args(call) if call else ("give_answer", reply.content)
                if kind == "give_up":
                    return False
                if any(s.response.ok for s in path):
                    trace.final_answer = answer
                    trace.path = list(path)
                    return True
                failed.append({"tool": FINISH.id, "tool_input": {"return_type": kind}})
                continue
            action = {"tool": call.api_id, "tool_input": dict(call.arguments)}
            if len(path) >= max_depth:
                failed.append(action)
                continue
            step = _execute(call, allowed, env, ledger, timeout_ms, len(path))
            trace.steps.append(ExecutionStep(step.request, step.response, len(trace.steps)))
            if not step.response.ok:
                failed.append(action)
                continue
            child = messages + [
                ChatMessage("assistant", reply.content, (call,)),
                ChatMessage("tool", render_tool_response(step.response), tool_call_id=call.call_id or "call"),
            ]
            digest = _state_digest(child)
            if digest in visited:
                failed.append(action)
                continue
            visited.add(digest)
            if expand(child, path + [step]):
                return True
            failed.append(action)
        return False

    try:
        trace.passed = expand(root, [])
    except _BudgetSpent:
        trace.cap_exhausted = True
        trace.passed = False
    return trace
