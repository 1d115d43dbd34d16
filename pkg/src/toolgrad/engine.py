"""The answer-first generation loop.

Each iteration samples a mini-batch of APIs, asks the proposer for up to ``m``
candidates, runs one tool-calling executor session per candidate in parallel,
lets the selector pick at most one verified step and where to attach it, and
then re-derives the user query and final response from the grown workflow.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from . import prompts
from .llm.gateway import BackendUnavailable, Gateway, GatewayError, SessionResult, StructuredOutputError, user
from .llm.schema import Boolean, Enum, Integer, ListOf, OptionalOf, SchemaError, String, StructuredSchema, nested
from .models import (
    NEW_CHAIN,
    ApiSpec,
    CostLedger,
    ExecutionReport,
    Proposal,
    Sample,
    Selection,
    Workflow,
    workflow_add,
)
from .tools import DEFAULT_TIMEOUT_MS, Registry, ToolEnvironment

log = logging.getLogger(__name__)

PROPOSER_SCHEMA = StructuredSchema.of(
    "api_proposals",
    apis=OptionalOf(ListOf(nested(name=String(), instruction=String()))),
)
REPORT_SCHEMA = StructuredSchema.of(
    "execution_report",
    success=Boolean(),
    justification=String(),
    successful_step=OptionalOf(Integer()),
)
SELECTOR_SCHEMA = StructuredSchema.of(
    "api_selection",
    decision=Enum(("abstain", "pick")),
    report_index=OptionalOf(Integer()),
    operation=OptionalOf(Enum(("append", "new_chain"))),
    chain_index=OptionalOf(Integer()),
)
INVERSE_SCHEMA = StructuredSchema.of("inverse_prediction", query=String(), response=String())


class InversePredictionError(GatewayError):
    pass


@dataclass(frozen=True)
class RunConfig:
    m: int = 3
    bs: int = 50
    T: int = 10
    p: int = 20
    seed: int = 0
    executor_cap: int = 4
    inverse_every_iteration: bool = True
    allow_reuse: bool = False
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    keep_trace: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.m <= self.bs:
            raise ValueError(f"need 1 <= m <= bs, got m={self.m} bs={self.bs}")
        if self.T < 1 or self.p < 1:
            raise ValueError("T and p must be >= 1")
        if self.executor_cap < 1:
            raise ValueError("executor_cap must be >= 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class IterationRecord:
    t: int
    batch_ids: list[str] = field(default_factory=list)
    proposals: list[Proposal] = field(default_factory=list)
    reports: list[ExecutionReport] = field(default_factory=list)
    selection: Selection = field(default_factory=Selection.abstain)
    q_t: str = ""
    r_t: str = ""
    notes: list[str] = field(default_factory=list)
    workflow_size: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "batch_ids": list(self.batch_ids),
            "proposals": [p.to_dict() for p in self.proposals],
            "reports": [r.to_dict() for r in self.reports],
            "selection": self.selection.to_dict(),
            "q_t": self.q_t,
            "r_t": self.r_t,
            "notes": list(self.notes),
            "workflow_size": self.workflow_size,
        }


def sample_minibatch(
    reg: Registry, w: Workflow, bs: int, rng: random.Random, allow_reuse: bool = False
) -> list[ApiSpec]:
    used = set() if allow_reuse else w.api_ids()
    available = [i for i in reg.ids() if i not in used]
    return [reg[i] for i in rng.sample(available, min(bs, len(available)))]


def _resolve(name: str, batch: Sequence[ApiSpec]) -> str | None:
    name = name.strip().strip("`")
    ids = {a.id for a in batch}
    if name in ids:
        return name
    by_name = [a.id for a in batch if a.name == name]
    return by_name[0] if len(by_name) == 1 else None


def propose(
    batch: Sequence[ApiSpec], w: Workflow, m: int, gateway: Gateway, ledger: CostLedger
) -> list[Proposal]:
    """Ask the proposer for up to ``m`` batch members worth executing.

    Raises :class:`StructuredOutputError` if the reply never fits the schema.
    """
    if not batch:
        raise ValueError("propose needs a nonempty batch")
    text = prompts.render(
        "proposer",
        max_proposals=m,
        workflow_cur=prompts.block(prompts.workflow_view(w)),
        api_all=prompts.block(prompts.pool_view(batch)),
    )
    out = gateway.chat([user(text)], PROPOSER_SCHEMA, role="proposer", ledger=ledger)
    proposals: list[Proposal] = []
    seen: set[str] = set()
    for item in out["apis"] or ():
        api_id = _resolve(item["name"], batch)
        if api_id is None:
            log.warning("proposer named %r, which is not in the mini-batch; dropped", item["name"])
            continue
        if api_id in seen:
            continue
        seen.add(api_id)
        proposals.append(Proposal(api_id, item["instruction"]))
    return proposals[:m]


def build_report(proposal: Proposal, session: SessionResult) -> ExecutionReport:
    history = tuple(session.history)
    if session.cap_exhausted and not session.final_text:
        return ExecutionReport(proposal, history, False, "tool-call cap exhausted before a report")
    try:
        out = REPORT_SCHEMA.parse(session.final_text)
    except SchemaError as exc:
        return ExecutionReport(proposal, history, False, f"unparsable executor report: {exc}")
    if not out["success"]:
        return ExecutionReport(proposal, history, False, out["justification"])
    idx = out["successful_step"]
    if idx is None or not 0 <= idx < len(history) or not history[idx].response.ok:
        ok = [i for i, s in enumerate(history) if s.response.ok and s.api_id == proposal.api_id]
        if not ok:
            return ExecutionReport(proposal, history, False, "claimed success without a successful call")
        log.warning("executor cited step %r for %s; using last successful step %d", idx, proposal.api_id, ok[-1])
        idx = ok[-1]
    if history[idx].api_id != proposal.api_id:
        return ExecutionReport(proposal, history, False, "successful step calls a different api")
    return ExecutionReport(proposal, history, True, out["justification"], idx)


def _run_executor(
    proposal: Proposal,
    reg: Registry,
    gateway: Gateway,
    env: ToolEnvironment,
    cap: int,
    timeout_ms: int,
) -> tuple[ExecutionReport, CostLedger]:
    ledger = CostLedger(executor_sessions=1)
    try:
        api = reg[proposal.api_id]
        session = gateway.tool_session(
            prompts.render("executor", plan=prompts.plan_text(api, proposal.instruction)),
            prompts.render("executor_task", api_id=api.id),
            [api],
            lambda req: env.execute(req, timeout_ms),
            max_tool_calls=cap,
            role="executor",
            ledger=ledger,
        )
    except BackendUnavailable:
        raise
    except Exception as exc:  # a crashed session must never abort the iteration
        log.warning("executor for %s crashed: %s", proposal.api_id, exc)
        return ExecutionReport(proposal, (), False, f"executor fault: {exc}"), ledger
    return build_report(proposal, session), ledger


def execute_proposals(
    proposals: Sequence[Proposal],
    reg: Registry,
    gateway: Gateway,
    env: ToolEnvironment,
    ledger: CostLedger,
    cap: int = 4,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> list[ExecutionReport]:
    """One concurrent executor session per proposal; reports come back in proposal order."""
    if not proposals:
        return []
    with ThreadPoolExecutor(max_workers=len(proposals), thread_name_prefix="executor") as pool:
        futures = [pool.submit(_run_executor, p, reg, gateway, env, cap, timeout_ms) for p in proposals]
        results = [f.result() for f in futures]
    for _, session_ledger in results:
        ledger.absorb(session_ledger)
    return [rep for rep, _ in results]


def select(
    reports: Sequence[ExecutionReport], w: Workflow, gateway: Gateway, ledger: CostLedger
) -> Selection:
    """Pick one successful report and its chain target, or abstain.

    Failed reports never reach the selector; with none left, no LLM call is made.
    """
    good = [(j, r) for j, r in enumerate(reports) if r.success]
    if not good:
        return Selection.abstain()
    text = prompts.render(
        "selector",
        workflow_cur=prompts.block(prompts.workflow_view(w)),
        api_reports=prompts.block([prompts.report_view(j, r) for j, r in good]),
    )
    try:
        out = gateway.chat([user(text)], SELECTOR_SCHEMA, role="selector", ledger=ledger)
    except StructuredOutputError as exc:
        log.warning("selector output unusable, abstaining: %s", exc)
        return Selection.abstain()
    if out["decision"] == "abstain":
        return Selection.abstain()
    j = out["report_index"]
    if j not in {i for i, _ in good}:
        log.warning("selector picked report %r, which is not a successful report; abstaining", j)
        return Selection.abstain()
    k = out["chain_index"]
    if out["operation"] == "new_chain" or k is None:
        target: int | str = NEW_CHAIN
    elif 0 <= k < len(w.chains):
        target = k
    else:
        log.warning("selector chain index %r out of range for %d chain(s); starting a new chain", k, len(w.chains))
        target = NEW_CHAIN
    return Selection("pick", j, target)


def apply_selection(w: Workflow, sel: Selection, reports: Sequence[ExecutionReport]) -> Workflow:
    if not sel.is_pick:
        return w
    step = reports[sel.report_index].successful_step
    if step is None:
        raise ValueError(f"report {sel.report_index} has no successful step")
    return workflow_add(w, step, sel.chain_target)


def inverse_predict(w: Workflow, gateway: Gateway, ledger: CostLedger) -> tuple[str, str]:
    if w.is_empty():
        raise ValueError("inverse prediction needs a nonempty workflow")
    text = prompts.render("inverse", api_use_chains=prompts.block(prompts.workflow_view(w)))
    out = gateway.chat([user(text)], INVERSE_SCHEMA, role="updater", ledger=ledger)
    q, r = out["query"].strip(), out["response"].strip()
    if not q or not r:
        raise InversePredictionError("updater returned an empty query or response")
    return q, r


def run_sample(
    cfg: RunConfig,
    reg: Registry,
    gateway: Gateway,
    env: ToolEnvironment,
    sample_id: str = "",
) -> Sample:
    """Run ``cfg.T`` iterations from an empty workflow and emit one sample."""
    rng = random.Random(cfg.seed)
    ledger = CostLedger()
    w = Workflow()
    q = r = ""
    qr_size = -1
    trace: list[IterationRecord] = []
    aborted = ""

    def predict(rec: IterationRecord | None) -> None:
        nonlocal q, r, qr_size
        try:
            q, r = inverse_predict(w, gateway, ledger)
            qr_size = w.size
        except (StructuredOutputError, InversePredictionError) as exc:
            log.warning("inverse prediction failed: %s", exc)
            if rec is not None:
                rec.notes.append(f"inverse prediction failed: {exc}")
        if rec is not None:
            rec.q_t, rec.r_t = q, r

    try:
        for t in range(cfg.T):
            rec = IterationRecord(t, workflow_size=w.size)
            trace.append(rec)
            batch = sample_minibatch(reg, w, cfg.bs, rng, cfg.allow_reuse)
            rec.batch_ids = [a.id for a in batch]
            if not batch:
                rec.notes.append("no unused apis left")
                continue
            try:
                rec.proposals = propose(batch, w, cfg.m, gateway, ledger)
            except StructuredOutputError as exc:
                rec.notes.append(f"degenerate: {exc}")
                continue
            if not rec.proposals:
                rec.notes.append("no proposals")
                continue
            rec.reports = execute_proposals(
                rec.proposals, reg, gateway, env, ledger, cfg.executor_cap, cfg.timeout_ms
            )
            rec.selection = select(rec.reports, w, gateway, ledger)
            if not rec.selection.is_pick:
                rec.q_t, rec.r_t = q, r
                continue
            w = apply_selection(w, rec.selection, rec.reports)
            rec.workflow_size = w.size
            if cfg.inverse_every_iteration:
                predict(rec)
        if not cfg.inverse_every_iteration and not w.is_empty():
            predict(trace[-1] if trace else None)
    except BackendUnavailable:
        raise
    except GatewayError as exc:
        log.error("generation aborted: %s", exc)
        aborted = str(exc)
        if trace:
            trace[-1].notes.append(f"aborted: {exc}")

    passed = not aborted and not w.is_empty() and bool(q) and bool(r) and qr_size == w.size
    return Sample(
        query=q,
        workflow=w,
        response=r,
        ledger=ledger,
        seed=cfg.seed,
        passed=passed,
        iteration_trace=tuple(rec.to_dict() for rec in trace) if cfg.keep_trace else None,
        sample_id=sample_id,
    )


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)
