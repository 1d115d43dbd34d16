"""Deterministic role policies for the scripted backend.

A script rule may delegate to one of these instead of returning canned text.
Each policy reads the fenced JSON blocks that the prompt renderers embed and
answers the way a cooperative model would, as a pure function of the
conversation. They exist so the full pipeline runs offline and reproducibly;
they make no claim to model real LLM behaviour.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Any, Mapping, Sequence

from ..models import ApiSpec, ToolCallRequest
from ..prompts import blocks, template
from .gateway import ChatMessage

TOKEN = re.compile(r"tok-[0-9a-f]{10}")
_TASK = re.compile(r"\((\d+)\) call `([^`]+)` with ")
RETRY_MARKER = template("dfs_retry").split("\n", 1)[0]


def _h(*parts: Any) -> int:
    return int(hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:16], 16)


def _last_user(messages: Sequence[ChatMessage]) -> str:
    for m in reversed(messages):
        if m.role == "user":
            return m.content
    return ""


def _first_user(messages: Sequence[ChatMessage]) -> str:
    for m in messages:
        if m.role == "user":
            return m.content
    return ""


def _system(messages: Sequence[ChatMessage]) -> str:
    return messages[0].content if messages and messages[0].role == "system" else ""


def _json_reply(obj: Any) -> ChatMessage:
    return ChatMessage("assistant", json.dumps(obj, sort_keys=True, ensure_ascii=False))


def _strings(value: Any) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, Mapping):
        return [s for v in value.values() for s in _strings(v)]
    if isinstance(value, list):
        return [s for v in value for s in _strings(v)]
    return []


def make_args(params: Sequence[Mapping[str, Any]], variant: int = 0, hint: str | None = None) -> dict[str, Any]:
    """Plausible arguments for a parameter list; ``variant`` perturbs them for retries."""
    args: dict[str, Any] = {}
    used_hint = False
    for p in params:
        kind = p.get("kind", "string")
        name = p["name"]
        if kind == "string":
            if hint and not used_hint:
                args[name] = hint if variant == 0 else f"{hint} #{variant}"
                used_hint = True
            else:
                args[name] = f"{name}-{variant}" if variant else name
        elif kind == "number":
            args[name] = 1 + variant
        elif kind == "boolean":
            args[name] = variant % 2 == 0
        elif kind == "array":
            args[name] = [variant]
        else:
            args[name] = {"variant": variant}
    return args


def format_tasks(tasks: Sequence[tuple[str, Mapping[str, Any]]]) -> str:
    items = [f"({i + 1}) call `{api}` with {json.dumps(dict(args), sort_keys=True)}" for i, (api, args) in enumerate(tasks)]
    return "Please help me with the following tasks: " + "; ".join(items) + "."


def parse_tasks(text: str) -> list[tuple[str, dict[str, Any]]]:
    """Inverse of :func:`format_tasks`; tolerant of surrounding prose."""
    decoder = json.JSONDecoder()
    tasks = []
    for m in _TASK.finditer(text):
        try:
            args, _ = decoder.raw_decode(text, m.end())
        except json.JSONDecodeError:
            args = {}
        tasks.append((m.group(2), args if isinstance(args, dict) else {}))
    return tasks


# ---------------------------------------------------------------------------
# generation roles


def proposer(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    text = _last_user(messages)
    workflow, pool = blocks(text)[:2]
    cap = re.search(r"up to (\d+) API-use proposals", text)
    salt = hashlib.sha256(text.encode()).hexdigest()
    count = int(options.get("count", cap.group(1) if cap else 3))
    if "count" not in options and count > 1 and _h(salt, "short") % 4 == 0:
        count -= 1  # "up to" N: now and then settle for fewer
    ranked = sorted(pool, key=lambda a: _h(salt, a["name"]))
    chains = workflow.get("chains", [])
    apis = []
    for a in ranked[:count]:
        instruction = f"Call {a['name']} with representative inputs."
        if chains and _h(salt, "dep", a["name"]) % 2 == 0:
            k = _h(salt, "chain", a["name"]) % len(chains)
            tokens = TOKEN.findall(json.dumps(chains[k]["steps"][-1]["response"]))
            if tokens:
                instruction = f"Feed {tokens[-1]} from chain {k} into {a['name']}."
        apis.append({"name": a["name"], "instruction": instruction})
    return _json_reply({"apis": apis})


def executor(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    api = tools[0]
    results = [json.loads(m.content) for m in messages if m.role == "tool"]
    attempts = len(results)
    max_attempts = int(options.get("attempts", 2))
    if options.get("mode") == "loop" or attempts == 0 or (results[-1]["status"] != "success" and attempts < max_attempts):
        hint = TOKEN.search(_system(messages))
        args = make_args([p.to_dict() for p in api.params], attempts, hint.group(0) if hint else None)
        return ChatMessage("assistant", "", (ToolCallRequest(api.id, args, f"exec_{attempts}"),))
    if results[-1]["status"] == "success":
        return _json_reply({"success": True, "justification": f"{api.id} returned a usable result", "successful_step": attempts - 1})
    return _json_reply({"success": False, "justification": f"{api.id} failed after {attempts} attempt(s)", "successful_step": None})


def selector(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    if options.get("abstain"):
        return _json_reply({"decision": "abstain", "report_index": None, "operation": None, "chain_index": None})
    workflow, reports = blocks(_last_user(messages))[:2]
    good = sorted((r for r in reports if r["success"]), key=lambda r: r["report_index"])
    if not good:
        return _json_reply({"decision": "abstain", "report_index": None, "operation": None, "chain_index": None})
    pick = good[0]
    step = pick["steps"][pick["successful_step"]]
    used = set(TOKEN.findall(" ".join(_strings(step["ToolAgentAction"]["tool_input"]))))
    for chain in workflow.get("chains", []):
        produced = set(TOKEN.findall(json.dumps([s["response"] for s in chain["steps"]])))
        if used & produced:
            return _json_reply({"decision": "pick", "report_index": pick["report_index"], "operation": "append",
                                "chain_index": chain["chain_index"]})
    return _json_reply({"decision": "pick", "report_index": pick["report_index"], "operation": "new_chain", "chain_index": None})


def updater(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    workflow = blocks(_last_user(messages))[0]
    tasks, results = [], []
    for chain in workflow.get("chains", []):
        for s in chain["steps"]:
            action = s["ToolAgentAction"]
            tasks.append((action["tool"], action["tool_input"]))
            tokens = TOKEN.findall(json.dumps(s["response"]))
            results.append(f"`{action['tool']}` returned {tokens[-1] if tokens else 'a result'}")
    return _json_reply({"query": format_tasks(tasks), "response": "Here is what I found: " + "; ".join(results) + "."})


def api_filter(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    api = blocks(_last_user(messages))[0]
    if api["name"] in set(options.get("reject", ())):
        return _json_reply({"keep": False, "reason": "listed for rejection"})
    min_words = int(options.get("min_words", 3))
    if len(api["description"].split()) < min_words:
        return _json_reply({"keep": False, "reason": "description too thin to use"})
    return _json_reply({"keep": True, "reason": "documented"})


# ---------------------------------------------------------------------------
# query-first baseline and evaluation roles


def query_generator(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    pool = blocks(_last_user(messages))[0]
    count = int(options.get("count", 3))
    tasks = [(a["name"], make_args(a["params"])) for a in pool[:count]]
    return _json_reply({"query": format_tasks(tasks)})


def _react_state(messages: Sequence[ChatMessage]) -> tuple[set[tuple[str, str]], set[tuple[str, str]]]:
    """(succeeded, attempted) actions on the current path, keyed by (api, canonical args)."""
    pending: dict[str, tuple[str, str]] = {}
    ok: set[tuple[str, str]] = set()
    tried: set[tuple[str, str]] = set()
    for m in messages:
        if m.role == "assistant":
            for c in m.tool_calls:
                pending[c.call_id] = (c.api_id, json.dumps(dict(c.arguments), sort_keys=True))
        elif m.role == "tool" and m.tool_call_id in pending:
            key = pending[m.tool_call_id]
            tried.add(key)
            if json.loads(m.content).get("status") == "success":
                ok.add(key)
    return ok, tried


def _failed_alternatives(messages: Sequence[ChatMessage]) -> set[tuple[str, str]]:
    last = messages[-1] if messages else None
    if last is None or last.role != "user" or not last.content.startswith(RETRY_MARKER):
        return set()
    return {(a["tool"], json.dumps(a["tool_input"], sort_keys=True)) for a in blocks(last.content)[0]}


def agent(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    """Tool-using answerer for the standard, ReAct and DFS drivers.

    ``mode``: ``oracle`` follows the tasks spelled out in the query, ``loop``
    keeps calling the first tool with fresh inputs, ``silent`` answers at once,
    ``distracted`` calls only tools the query does not mention.
    """
    mode = options.get("mode", "oracle")
    available = {t.id for t in tools}
    tasks = [(api, args) for api, args in parse_tasks(_first_user(messages)) if api in available]
    if mode == "distracted":
        named = {api for api, _ in parse_tasks(_first_user(messages))}
        tasks = [(t.id, make_args([p.to_dict() for p in t.params])) for t in tools if t.id not in named and t.id != "finish"][:2]
    one_shot = _system(messages).startswith(template("agent_standard").split("\n", 1)[0])
    if mode == "silent" or (not tasks and mode != "loop"):
        return _finish(one_shot, "I could not find a way to help with this request.")
    if one_shot:
        calls = tuple(ToolCallRequest(api, dict(args), f"std_{i}") for i, (api, args) in enumerate(tasks))
        return ChatMessage("assistant", "", calls)
    ok, tried = _react_state(messages)
    turn = sum(1 for m in messages if m.role == "assistant")
    failed = _failed_alternatives(messages)
    if mode == "loop":
        first = next(t for t in tools if t.id != "finish")
        variant = turn * 3 + len(failed)  # a retry asks for something new
        args = make_args([p.to_dict() for p in first.params], variant)
        return ChatMessage("assistant", "", (ToolCallRequest(first.id, args, f"loop_{variant}"),))
    for api, args in tasks:
        key = (api, json.dumps(args, sort_keys=True))
        if key in tried or key in failed:
            continue
        return ChatMessage("assistant", "", (ToolCallRequest(api, dict(args), f"react_{turn}"),))
    if not ok:
        return _finish(False, "Every call failed; giving up on this path.", give_up=True)
    return _finish(False, f"Done: {len(ok)} call(s) succeeded.")


def _finish(one_shot: bool, answer: str, give_up: bool = False) -> ChatMessage:
    if one_shot:
        return ChatMessage("assistant", answer)
    args = {"return_type": "give_up" if give_up else "give_answer", "final_answer": answer}
    return ChatMessage("assistant", "", (ToolCallRequest("finish", args, "finish"),))


def writer(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    trace = blocks(_last_user(messages))[0]
    good = [t for t in trace if t["api_response"]["status"] == "success"]
    if not good:
        return ChatMessage("assistant", "I could not obtain any results for your request.")
    parts = []
    for t in good:
        tokens = TOKEN.findall(json.dumps(t["api_response"]["body"]))
        parts.append(f"`{t['api_use_request']['tool']}` returned {tokens[-1] if tokens else 'a result'}")
    return ChatMessage("assistant", "Here is what I found: " + "; ".join(parts) + ".")


def judge(messages: Sequence[ChatMessage], tools: Sequence[ApiSpec], options: Mapping[str, Any]) -> ChatMessage:
    text = _last_user(messages)
    query = text.split("User query:\n", 1)[-1].split("\n\nTool use trace:", 1)[0]
    pred = text.split("The response to evaluate:\n", 1)[-1].split("\n\nGround truth response:", 1)[0]
    trace = blocks(text)[0]
    tasks = parse_tasks(query) or [("", {})]
    scores = []
    for api, _ in tasks:
        if api and f"`{api}`" not in pred:
            continue
        related = [t for t in trace if t["api_use_request"]["tool"] == api]
        good = [t for t in related if t["api_response"]["status"] == "success"]
        if not good:
            scores.append(0)
            continue
        tokens = set(TOKEN.findall(json.dumps([t["api_response"]["body"] for t in good])))
        scores.append(100 if any(tok in pred for tok in tokens) else 60)
    final = sum(scores) / len(tasks)
    return _json_reply({"tasks_identified": len(tasks), "per_task_scores": scores, "final_score": final})


POLICIES = {
    "proposer": proposer,
    "executor": executor,
    "selector": selector,
    "updater": updater,
    "filter": api_filter,
    "query_generator": query_generator,
    "agent": agent,
    "writer": writer,
    "judge": judge,
}


def cooperative_script() -> list[dict[str, Any]]:
    """Rules routing every pipeline prompt to its policy; ``load_script`` accepts the same shape."""

    def first_line(name: str) -> str:
        return template(name).split("\n", 1)[0]

    return [
        {"match": "prefix", "pattern": first_line("proposer"), "target": "first", "policy": "proposer"},
        {"match": "prefix", "pattern": first_line("executor"), "target": "system", "policy": "executor"},
        {"match": "prefix", "pattern": first_line("selector"), "target": "first", "policy": "selector"},
        {"match": "prefix", "pattern": "Given the following API usage chains:", "target": "first", "policy": "updater"},
        {"match": "prefix", "pattern": first_line("filter"), "target": "first", "policy": "filter"},
        {"match": "prefix", "pattern": first_line("query_gen"), "target": "first", "policy": "query_generator"},
        {"match": "prefix", "pattern": first_line("writer"), "target": "first", "policy": "writer"},
        {"match": "prefix", "pattern": first_line("judge"), "target": "first", "policy": "judge"},
        {"match": "prefix", "pattern": first_line("agent_standard"), "target": "system", "policy": "agent"},
        {"match": "prefix", "pattern": first_line("agent_react"), "target": "system", "policy": "agent"},
    ]
