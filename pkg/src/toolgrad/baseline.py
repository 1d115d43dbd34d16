"""Query-first baseline: invent a user query from a few APIs, then search for a solution with DFS."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Sequence

from . import prompts
from .agents import run_dfs
from .llm.gateway import Gateway, GatewayError, StructuredOutputError, user
from .llm.schema import String, StructuredSchema
from .models import Chain, CostLedger, Workflow, ledger_sum
from .tools import DEFAULT_TIMEOUT_MS, Registry, ToolEnvironment

log = logging.getLogger(__name__)

QUERY_SCHEMA = StructuredSchema.of("generated_query", query=String())


@dataclass(frozen=True)
class BaselineConfig:
    subset_size: int = 5
    max_llm_calls: int = 30
    max_depth: int = 6
    max_alternatives: int = 2
    seed: int = 0
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BaselineConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class BaselineResult:
    query: str
    passed: bool
    workflow: Workflow | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    sample_id: str = ""
    api_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.passed and self.workflow is None:
            raise ValueError("a passed baseline result needs a workflow")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "generator": "dfs-baseline",
            "passed": self.passed,
            "query": self.query,
            "api_ids": list(self.api_ids),
            "workflow": self.workflow.to_dict() if self.workflow is not None else None,
            "ledger": self.ledger.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BaselineResult:
        wf = d.get("workflow")
        return cls(
            query=d.get("query", ""),
            passed=bool(d.get("passed")),
            workflow=Workflow.from_dict(wf) if wf is not None else None,
            ledger=CostLedger.from_dict(d.get("ledger") or {}),
            sample_id=d.get("sample_id", ""),
            api_ids=list(d.get("api_ids") or ()),
        )


def generate_query(subset: Sequence, gateway: Gateway, ledger: CostLedger) -> str:
    """One structured call that invents a query over ``subset``; feasibility is not checked."""
    if not subset:
        raise ValueError("query generation needs a nonempty API subset")
    text = prompts.render("query_gen", api_pool=prompts.block([prompts.api_view(a) for a in subset]))
    out = gateway.chat([user(text)], QUERY_SCHEMA, role="agent", ledger=ledger)
    return out["query"].strip()


def dfs_annotate(
    query: str,
    tools: Sequence,
    gateway: Gateway,
    env: ToolEnvironment,
    ledger: CostLedger,
    max_llm_calls: int = 30,
    max_depth: int = 6,
    max_alternatives: int = 2,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> BaselineResult:
    trace = run_dfs(query, tools, gateway, env, ledger, max_llm_calls, max_depth, max_alternatives, timeout_ms)
    workflow = Workflow((Chain(tuple(trace.path)),)) if trace.passed else None
    return BaselineResult(query, trace.passed, workflow, ledger, api_ids=[t.id for t in tools])


def annotate_one(
    cfg: BaselineConfig,
    subset: Sequence,
    gateway: Gateway,
    env: ToolEnvironment,
    sample_id: str = "",
) -> BaselineResult:
    ledger = CostLedger()
    try:
        query = generate_query(subset, gateway, ledger)
    except StructuredOutputError as exc:
        log.warning("query generation failed: %s", exc)
        return BaselineResult("", False, None, ledger, sample_id, [a.id for a in subset])
    try:
        res = dfs_annotate(query, subset, gateway, env, ledger, cfg.max_llm_calls, cfg.max_depth,
                           cfg.max_alternatives, cfg.timeout_ms)
    except GatewayError as exc:
        log.error("baseline annotation aborted: %s", exc)
        return BaselineResult(query, False, None, ledger, sample_id, [a.id for a in subset])
    res.sample_id = sample_id
    return res


def baseline_subsets(reg: Registry, count: int, subset_size: int, seed: int) -> list[list]:
    rng = random.Random(seed)
    ids = reg.ids()
    return [[reg[i] for i in rng.sample(ids, min(subset_size, len(ids)))] for _ in range(count)]


def aggregate(results: Sequence[BaselineResult]) -> dict[str, float]:
    """Pass rate over all results; tool uses over passed ones only; costs over all."""
    if not results:
        raise ValueError("nothing to aggregate")
    passed = [r for r in results if r.passed]
    total = ledger_sum(r.ledger for r in results)
    return {
        "count": len(results),
        "pass_rate": 100.0 * len(passed) / len(results),
        "mean_tool_uses_passed": (sum(r.workflow.size for r in passed) / len(passed)) if passed else 0.0,
        "mean_llm_cost": total.llm_calls / len(results),
        "mean_tool_cost": total.tool_calls / len(results),
    }


def run_baseline(
    cfg: BaselineConfig,
    reg: Registry,
    gateway: Gateway,
    env: ToolEnvironment,
    count: int,
    subsets: Sequence[Sequence] | None = None,
) -> tuple[list[BaselineResult], dict[str, float]]:
    if count < 1:
        raise ValueError("count must be >= 1")
    subsets = list(subsets) if subsets is not None else baseline_subsets(reg, count, cfg.subset_size, cfg.seed)
    results = [annotate_one(cfg, subsets[i], gateway, env, f"dfs-{i:06d}") for i in range(count)]
    return results, aggregate(results)
