"""Evaluation of tool-using agents on generated samples: recall, success rate, judged response quality."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import prompts
from .agents import AgentTrace, run_dfs, run_react, run_standard
from .llm.gateway import Gateway, GatewayError, StructuredOutputError, user
from .llm.schema import Integer, ListOf, Number, StructuredSchema
from .models import CostLedger, ExecutionStep, Sample
from .tools import DEFAULT_TIMEOUT_MS, Registry, ToolEnvironment

log = logging.getLogger(__name__)

FRAMEWORKS = ("standard", "react", "dfs")

JUDGE_SCHEMA = StructuredSchema.of(
    "qor_judgement",
    tasks_identified=Integer(),
    per_task_scores=ListOf(Number()),
    final_score=Number(),
)


@dataclass
class EvalRecord:
    sample_id: str
    framework: str
    predicted_calls: list[ExecutionStep] = field(default_factory=list)
    response_text: str = ""
    recall: float = 0.0
    success_rate: float = 0.0
    qor: float | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    flags: list[str] = field(default_factory=list)
    llm_steps: int = 0

    def __post_init__(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"unknown framework {self.framework!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "framework": self.framework,
            "recall": self.recall,
            "success_rate": self.success_rate,
            "qor": self.qor,
            "llm_steps": self.llm_steps,
            "tool_calls": len(self.predicted_calls),
            "response_text": self.response_text,
            "predicted_calls": [s.to_dict() for s in self.predicted_calls],
            "flags": list(self.flags),
            "ledger": self.ledger.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvalRecord:
        return cls(
            sample_id=d["sample_id"],
            framework=d["framework"],
            predicted_calls=[ExecutionStep.from_dict(s) for s in d.get("predicted_calls") or ()],
            response_text=d.get("response_text", ""),
            recall=float(d.get("recall", 0.0)),
            success_rate=float(d.get("success_rate", 0.0)),
            qor=d.get("qor"),
            ledger=CostLedger.from_dict(d.get("ledger") or {}),
            flags=list(d.get("flags") or ()),
            llm_steps=int(d.get("llm_steps", 0)),
        )


# ---------------------------------------------------------------------------
# metrics


def tool_recall(predicted: Iterable[str], gt: Iterable[str]) -> float:
    gt = set(gt)
    if not gt:
        raise ValueError("ground truth tool set is empty")
    return 100.0 * len(set(predicted) & gt) / len(gt)


def success_rate(predicted_steps: Iterable[ExecutionStep], gt: Iterable[str]) -> float:
    gt = set(gt)
    if not gt:
        raise ValueError("ground truth tool set is empty")
    ok = {s.api_id for s in predicted_steps if s.response.ok}
    return 100.0 * len(ok & gt) / len(gt)


def recompute_final(tasks_identified: int, per_task_scores: Sequence[float]) -> float:
    """Mean over every identified task; tasks the judge did not score count as 0."""
    denom = max(tasks_identified, len(per_task_scores))
    if denom == 0:
        return 0.0
    clipped = [min(max(float(s), 0.0), 100.0) for s in per_task_scores]
    return sum(clipped) / denom


# ---------------------------------------------------------------------------
# response writing and judging


def write_response(query: str, trace: Sequence[ExecutionStep], gateway: Gateway, ledger: CostLedger) -> str:
    text = prompts.render("writer", query=query, tool_use_trace=prompts.block(prompts.trace_view(trace)))
    try:
        return gateway.chat([user(text)], role="writer", ledger=ledger).content.strip()
    except GatewayError as exc:
        log.warning("response writer failed: %s", exc)
        return ""


def qor_score(
    query: str,
    trace: Sequence[ExecutionStep],
    pred_response: str,
    gt_response: str,
    gateway: Gateway,
    ledger: CostLedger,
) -> float:
    """Judge the reply; the final score is recomputed from the judge's per-task scores.

    Raises :class:`StructuredOutputError` when the judge never produces a usable verdict.
    """
    if not pred_response.strip():
        return 0.0
    text = prompts.render(
        "judge",
        query=query,
        tool_use_trace=prompts.block(prompts.trace_view(trace)),
        pred=pred_response,
        gt=gt_response,
    )
    out = gateway.chat([user(text)], JUDGE_SCHEMA, role="judge", ledger=ledger)
    if not any(s.response.ok for s in trace):
        return 0.0
    return recompute_final(out["tasks_identified"], out["per_task_scores"])


# ---------------------------------------------------------------------------
# drivers


def presented_tools(sample: Sample, reg: Registry, seed: int | None = None) -> list:
    ids = sorted(set(sample.positive_api_ids) | set(sample.negative_api_ids))
    random.Random(f"tools:{sample.seed if seed is None else seed}:{sample.sample_id}").shuffle(ids)
    return [reg[i] for i in ids if i in reg]


def _record(sample: Sample, framework: str, trace: AgentTrace, ledger: CostLedger) -> EvalRecord:
    rec = EvalRecord(sample.sample_id, framework, list(trace.steps), ledger=ledger, llm_steps=trace.llm_calls)
    if trace.cap_exhausted:
        rec.flags.append("cap_exhausted" if framework != "dfs" else "budget_exhausted")
    if not trace.steps:
        rec.flags.append("no_calls")
    return rec


def drive_standard(sample: Sample, reg: Registry, gateway: Gateway, env: ToolEnvironment,
                   timeout_ms: int = DEFAULT_TIMEOUT_MS) -> EvalRecord:
    ledger = CostLedger()
    trace = run_standard(sample.query, presented_tools(sample, reg), gateway, env, ledger, timeout_ms)
    return _record(sample, "standard", trace, ledger)


def drive_react(sample: Sample, reg: Registry, gateway: Gateway, env: ToolEnvironment, cap: int = 10,
                timeout_ms: int = DEFAULT_TIMEOUT_MS) -> EvalRecord:
    ledger = CostLedger()
    trace = run_react(sample.query, presented_tools(sample, reg), gateway, env, ledger, cap, timeout_ms)
    return _record(sample, "react", trace, ledger)


def drive_dfs(sample: Sample, reg: Registry, gateway: Gateway, env: ToolEnvironment, max_llm_calls: int = 30,
              max_depth: int = 6, max_alternatives: int = 2, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> EvalRecord:
    ledger = CostLedger()
    trace = run_dfs(sample.query, presented_tools(sample, reg), gateway, env, ledger, max_llm_calls, max_depth,
                    max_alternatives, timeout_ms)
    return _record(sample, "dfs", trace, ledger)


@dataclass(frozen=True)
class EvalConfig:
    react_cap: int = 10
    dfs_max_llm_calls: int = 30
    dfs_max_depth: int = 6
    dfs_max_alternatives: int = 2
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvalConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def evaluate_sample(
    sample: Sample,
    framework: str,
    reg: Registry,
    agent: Gateway,
    env: ToolEnvironment,
    writer: Gateway,
    judge: Gateway,
    cfg: EvalConfig = EvalConfig(),
) -> EvalRecord:
    """Run one framework on one sample, then write and judge the reply."""
    if framework == "standard":
        rec = drive_standard(sample, reg, agent, env, cfg.timeout_ms)
    elif framework == "react":
        rec = drive_react(sample, reg, agent, env, cfg.react_cap, cfg.timeout_ms)
    elif framework == "dfs":
        rec = drive_dfs(sample, reg, agent, env, cfg.dfs_max_llm_calls, cfg.dfs_max_depth,
                        cfg.dfs_max_alternatives, cfg.timeout_ms)
    else:
        raise ValueError(f"unknown framework {framework!r}")
    gt = sample.positive_api_ids
    rec.recall = tool_recall({s.api_id for s in rec.predicted_calls}, gt)
    rec.success_rate = success_rate(rec.predicted_calls, gt)
    rec.response_text = write_response(sample.query, rec.predicted_calls, writer, rec.ledger)
    try:
        rec.qor = qor_score(sample.query, rec.predicted_calls, rec.response_text, sample.response, judge, rec.ledger)
    except StructuredOutputError as exc:
        log.warning("judge output unusable for %s/%s: %s", sample.sample_id, framework, exc)
        rec.flags.append("judge_unparsable")
        rec.qor = None
    return rec


def _mean(xs: Sequence[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def aggregate_report(records: Sequence[EvalRecord]) -> dict[str, dict[str, Any]]:
    """Per-framework means of recall, success, QoR, LLM steps and tool calls."""
    if not records:
        raise ValueError("no records to aggregate")
    out: dict[str, dict[str, Any]] = {}
    for fw in FRAMEWORKS:
        rs = [r for r in records if r.framework == fw]
        if not rs:
            continue
        out[fw] = {
            "count": len(rs),
            "recall": _mean([r.recall for r in rs]),
            "success_rate": _mean([r.success_rate for r in rs]),
            "qor": _mean([r.qor for r in rs if r.qor is not None]),
            "llm_steps": _mean([float(r.llm_steps) for r in rs]),
            "tool_calls": _mean([float(len(r.predicted_calls)) for r in rs]),
        }
    return out


def format_table(summary: dict[str, dict[str, Any]]) -> str:
    cols = ("count", "recall", "success_rate", "qor", "llm_steps", "tool_calls")
    header = ["framework", *cols]
    rows = [header]
    for fw, stats in summary.items():
        row = [fw]
        for c in cols:
            v = stats.get(c)
            row.append("-" if v is None else (str(v) if c == "count" else f"{v:.2f}"))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
