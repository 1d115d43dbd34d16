"""Domain types: APIs, execution steps, workflows, reports, samples, cost ledgers.

Pure data, no I/O. Everything except :class:`CostLedger` is a frozen value;
the ledger is the one accumulator and each caller owns its own instance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Union

PARAM_KINDS = ("string", "number", "boolean", "object", "array")
RESPONSE_STATUSES = ("success", "error", "timeout")
LEDGER_ROLES = ("proposer", "executor", "selector", "updater", "filter", "judge", "writer", "agent")
GENERATION_ROLES = ("proposer", "executor", "selector", "updater")

NEW_CHAIN = "new_chain"
ChainTarget = Union[int, str]


def slugify(name: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")
    return slug or "api"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str = "string"
    required: bool = False
    description: str = ""

    def __post_init__(self) -> None:
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"param {self.name!r}: kind {self.kind!r} not in {PARAM_KINDS}")
        if self.required and not self.name:
            raise ValueError("required param must have a nonempty name")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "required": self.required, "description": self.description}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ParamSpec:
        return cls(
            name=str(d.get("name", "")),
            kind=str(d.get("kind", "string")),
            required=bool(d.get("required", False)),
            description=str(d.get("description", "")),
        )


@dataclass(frozen=True)
class ApiSpec:
    """One API of the library.

    ``extensions`` carries live-mode plumbing (``endpoint``, ``method``,
    ``headers``) and is never shown to the proposer.
    """

    id: str
    name: str
    description: str = ""
    params: tuple[ParamSpec, ...] = ()
    category: str | None = None
    extensions: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("ApiSpec.id must be nonempty")
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def embed_text(self) -> str:
        return f"{self.name}: {self.description}"

    def json_schema(self) -> dict[str, Any]:
        props = {}
        for p in self.params:
            props[p.name] = {"type": p.kind, "description": p.description}
        return {
            "type": "object",
            "properties": props,
            "required": [p.name for p in self.params if p.required],
        }

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "params": [p.to_dict() for p in self.params],
            "category": self.category,
        }
        if self.extensions:
            d["extensions"] = dict(self.extensions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ApiSpec:
        name = str(d.get("name") or d.get("id") or "")
        return cls(
            id=str(d.get("id") or slugify(name)),
            name=name,
            description=str(d.get("description") or ""),
            params=tuple(ParamSpec.from_dict(p) for p in d.get("params") or ()),
            category=d.get("category"),
            extensions=dict(d.get("extensions") or {}),
        )


@dataclass(frozen=True)
class ToolCallRequest:
    api_id: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    # wire correlation id for chat transcripts; never part of a recorded step
    call_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"api_id": self.api_id, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ToolCallRequest:
        return cls(api_id=str(d["api_id"]), arguments=dict(d.get("arguments") or {}))


@dataclass(frozen=True)
class ToolResponse:
    status: str
    body: Any = None
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.status not in RESPONSE_STATUSES:
            raise ValueError(f"unknown response status {self.status!r}")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be nonnegative")

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "body": self.body, "latency_ms": self.latency_ms}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ToolResponse:
        return cls(status=str(d["status"]), body=d.get("body"), latency_ms=int(d.get("latency_ms", 0)))


@dataclass(frozen=True)
class ExecutionStep:
    request: ToolCallRequest
    response: ToolResponse
    step_index: int = 0

    @property
    def api_id(self) -> str:
        return self.request.api_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "request": self.request.to_dict(),
            "response": self.response.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionStep:
        return cls(
            request=ToolCallRequest.from_dict(d["request"]),
            response=ToolResponse.from_dict(d["response"]),
            step_index=int(d.get("step_index", 0)),
        )


@dataclass(frozen=True)
class Chain:
    steps: tuple[ExecutionStep, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        for i, s in enumerate(self.steps):
            if s.step_index != i:
                raise ValueError(f"chain step {i} carries step_index {s.step_index}")

    def __len__(self) -> int:
        return len(self.steps)

    def appended(self, step: ExecutionStep) -> Chain:
        return Chain(self.steps + (replace(step, step_index=len(self.steps)),))

    def to_dict(self) -> dict[str, Any]:
        return {"steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Chain:
        return cls(tuple(ExecutionStep.from_dict(s) for s in d.get("steps") or ()))


@dataclass(frozen=True)
class Workflow:
    chains: tuple[Chain, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "chains", tuple(self.chains))

    @property
    def size(self) -> int:
        return sum(len(c) for c in self.chains)

    def is_empty(self) -> bool:
        return self.size == 0

    def steps(self) -> list[ExecutionStep]:
        return [s for c in self.chains for s in c.steps]

    def api_ids(self) -> set[str]:
        return {s.api_id for s in self.steps()}

    def to_dict(self) -> dict[str, Any]:
        return {"chains": [c.to_dict() for c in self.chains]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Workflow:
        return cls(tuple(Chain.from_dict(c) for c in d.get("chains") or ()))


def workflow_add(w: Workflow, step: ExecutionStep, target: ChainTarget) -> Workflow:
    """Return ``w`` with ``step`` appended to chain ``target`` or to a fresh chain."""
    if target == NEW_CHAIN:
        return Workflow(w.chains + (Chain().appended(step),))
    if isinstance(target, bool) or not isinstance(target, int):
        raise TypeError(f"chain target must be an int or {NEW_CHAIN!r}, got {target!r}")
    if not 0 <= target < len(w.chains):
        raise IndexError(f"chain index {target} out of range for {len(w.chains)} chain(s)")
    chains = list(w.chains)
    chains[target] = chains[target].appended(step)
    return Workflow(tuple(chains))


@dataclass(frozen=True)
class Proposal:
    api_id: str
    instruction: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"api_id": self.api_id, "instruction": self.instruction}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Proposal:
        return cls(api_id=str(d["api_id"]), instruction=str(d.get("instruction", "")))


@dataclass(frozen=True)
class ExecutionReport:
    proposal: Proposal
    history: tuple[ExecutionStep, ...] = ()
    success: bool = False
    justification: str = ""
    successful_step_index: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(self.history))
        if self.success:
            i = self.successful_step_index
            if i is None or not 0 <= i < len(self.history) or not self.history[i].response.ok:
                raise ValueError("successful report must point at a successful step")

    @property
    def successful_step(self) -> ExecutionStep | None:
        if not self.success or self.successful_step_index is None:
            return None
        return self.history[self.successful_step_index]

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposal": self.proposal.to_dict(),
            "history": [s.to_dict() for s in self.history],
            "success": self.success,
            "justification": self.justification,
            "successful_step_index": self.successful_step_index,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionReport:
        return cls(
            proposal=Proposal.from_dict(d["proposal"]),
            history=tuple(ExecutionStep.from_dict(s) for s in d.get("history") or ()),
            success=bool(d.get("success", False)),
            justification=str(d.get("justification", "")),
            successful_step_index=d.get("successful_step_index"),
        )


@dataclass(frozen=True)
class Selection:
    decision: str = "abstain"
    report_index: int | None = None
    chain_target: ChainTarget | None = None

    def __post_init__(self) -> None:
        if self.decision not in ("abstain", "pick"):
            raise ValueError(f"unknown selection decision {self.decision!r}")
        if self.decision == "pick" and (self.report_index is None or self.chain_target is None):
            raise ValueError("pick requires report_index and chain_target")

    @classmethod
    def abstain(cls) -> Selection:
        return cls("abstain")

    @property
    def is_pick(self) -> bool:
        return self.decision == "pick"

    def to_dict(self) -> dict[str, Any]:
        return {"decision": self.decision, "report_index": self.report_index, "chain_target": self.chain_target}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Selection:
        return cls(d.get("decision", "abstain"), d.get("report_index"), d.get("chain_target"))


@dataclass
class CostLedger:
    """Counts of LLM module invocations by role, executor sessions and tool calls.

    ``backend_calls`` counts every raw model round-trip (retries, re-asks and
    turns inside a tool session included); role counters count module
    invocations.
    """

    llm_calls_by_role: dict[str, int] = field(default_factory=dict)
    executor_sessions: int = 0
    tool_calls: int = 0
    backend_calls: int = 0

    def __post_init__(self) -> None:
        unknown = sorted(set(self.llm_calls_by_role) - set(LEDGER_ROLES))
        if unknown:
            raise ValueError(f"unknown ledger role(s) {unknown}")
        counts = [*self.llm_calls_by_role.values(), self.executor_sessions, self.tool_calls, self.backend_calls]
        if any(c < 0 for c in counts):
            raise ValueError("ledger counts must be nonnegative")
        # zero entries carry no information; dropping them keeps equality semantic
        self.llm_calls_by_role = {r: c for r, c in self.llm_calls_by_role.items() if c}

    def charge(self, role: str, n: int = 1) -> None:
        if role not in LEDGER_ROLES:
            raise ValueError(f"unknown ledger role {role!r}")
        self.llm_calls_by_role[role] = self.llm_calls_by_role.get(role, 0) + n

    def calls(self, role: str) -> int:
        return self.llm_calls_by_role.get(role, 0)

    @property
    def llm_calls(self) -> int:
        return sum(self.llm_calls_by_role.values())

    @property
    def generation_llm_calls(self) -> int:
        return sum(self.calls(r) for r in GENERATION_ROLES)

    def absorb(self, other: CostLedger) -> None:
        merged = ledger_merge(self, other)
        self.llm_calls_by_role = merged.llm_calls_by_role
        self.executor_sessions = merged.executor_sessions
        self.tool_calls = merged.tool_calls
        self.backend_calls = merged.backend_calls

    def to_dict(self) -> dict[str, Any]:
        return {
            "llm_calls_by_role": {r: self.llm_calls_by_role[r] for r in LEDGER_ROLES if r in self.llm_calls_by_role},
            "executor_sessions": self.executor_sessions,
            "tool_calls": self.tool_calls,
            "backend_calls": self.backend_calls,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CostLedger:
        return cls(
            llm_calls_by_role={str(k): int(v) for k, v in (d.get("llm_calls_by_role") or {}).items()},
            executor_sessions=int(d.get("executor_sessions", 0)),
            tool_calls=int(d.get("tool_calls", 0)),
            backend_calls=int(d.get("backend_calls", 0)),
        )


def ledger_merge(a: CostLedger, b: CostLedger) -> CostLedger:
    roles = {}
    for role in sorted(set(a.llm_calls_by_role) | set(b.llm_calls_by_role)):
        roles[role] = a.calls(role) + b.calls(role)
    return CostLedger(
        llm_calls_by_role=roles,
        executor_sessions=a.executor_sessions + b.executor_sessions,
        tool_calls=a.tool_calls + b.tool_calls,
        backend_calls=a.backend_calls + b.backend_calls,
    )


def ledger_sum(ledgers: Iterable[CostLedger]) -> CostLedger:
    total = CostLedger()
    for led in ledgers:
        total = ledger_merge(total, led)
    return total


@dataclass(frozen=True)
class Sample:
    query: str
    workflow: Workflow
    response: str
    negative_api_ids: tuple[str, ...] = ()
    ledger: CostLedger = field(default_factory=CostLedger)
    seed: int = 0
    passed: bool = False
    iteration_trace: tuple[Mapping[str, Any], ...] | None = None
    sample_id: str = ""
    generator: str = "toolgrad"

    def __post_init__(self) -> None:
        object.__setattr__(self, "negative_api_ids", tuple(self.negative_api_ids))
        if self.iteration_trace is not None:
            object.__setattr__(self, "iteration_trace", tuple(self.iteration_trace))

    @property
    def positive_api_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.workflow.steps():
            seen.setdefault(s.api_id, None)
        return list(seen)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "sample_id": self.sample_id,
            "generator": self.generator,
            "seed": self.seed,
            "passed": self.passed,
            "query": self.query,
            "workflow": self.workflow.to_dict(),
            "response": self.response,
            "negative_api_ids": list(self.negative_api_ids),
            "ledger": self.ledger.to_dict(),
        }
        if self.iteration_trace is not None:
            d["iteration_trace"] = [dict(rec) for rec in self.iteration_trace]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Sample:
        trace = d.get("iteration_trace")
        return cls(
            query=str(d.get("query", "")),
            workflow=Workflow.from_dict(d.get("workflow") or {}),
            response=str(d.get("response", "")),
            negative_api_ids=tuple(d.get("negative_api_ids") or ()),
            ledger=CostLedger.from_dict(d.get("ledger") or {}),
            seed=int(d.get("seed", 0)),
            passed=bool(d.get("passed", False)),
            iteration_trace=tuple(trace) if trace is not None else None,
            sample_id=str(d.get("sample_id", "")),
            generator=str(d.get("generator", "toolgrad")),
        )


def sample_validate(s: Sample, p: int | None = None, library_size: int | None = None) -> list[str]:
    """List every invariant ``s`` violates; empty means well-formed.

    With ``p`` given, the negative count must equal ``p - n`` (``n`` distinct
    positives), capped by ``library_size - n`` when the library is known.
    """
    problems: list[str] = []
    positives = set(s.positive_api_ids)
    negatives = list(s.negative_api_ids)
    if s.passed:
        if s.workflow.is_empty():
            problems.append("pass requires nonempty workflow")
        if not s.query.strip():
            problems.append("pass requires nonempty query")
        if not s.response.strip():
            problems.append("pass requires nonempty response")
    if positives & set(negatives):
        problems.append("negatives intersect positives")
    if len(set(negatives)) != len(negatives):
        problems.append("duplicate negative ids")
    for ci, chain in enumerate(s.workflow.chains):
        for i, step in enumerate(chain.steps):
            if step.step_index != i:
                problems.append(f"chain {ci} step {i} has step_index {step.step_index}")
            if not step.response.ok:
                problems.append(f"chain {ci} step {i} is not a successful call")
    if p is not None:
        n = len(positives)
        if n > p:
            problems.append(f"{n} positives exceed p={p}")
        else:
            want = p - n
            if library_size is not None:
                want = min(want, max(library_size - n, 0))
            if len(negatives) != want:
                problems.append(f"expected {want} negatives, found {len(negatives)}")
    return problems
