import json
import random

import pytest
from conftest import api, gateway, sim, step
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from toolgrad.engine import (
    InversePredictionError,
    RunConfig,
    apply_selection,
    build_report,
    execute_proposals,
    inverse_predict,
    propose,
    run_sample,
    sample_minibatch,
    select,
)
from toolgrad.llm.gateway import BackendUnavailable, Gateway, SessionResult, TransportError
from toolgrad.llm.policies import parse_tasks
from toolgrad.models import (
    NEW_CHAIN,
    CostLedger,
    ExecutionReport,
    ExecutionStep,
    Proposal,
    Selection,
    ToolCallRequest,
    ToolResponse,
    Workflow,
    workflow_add,
)
from toolgrad.prompts import template
from toolgrad.tools import Registry


def head(name: str) -> str:
    return template(name).split("\n", 1)[0]


def reply(name: str, obj, target: str = "first") -> dict:
    return {"match": "prefix", "pattern": head(name), "target": target, "reply": json.dumps(obj)}


def policy(name: str, role: str, target: str = "first", **options) -> dict:
    return {"match": "prefix", "pattern": head(name), "target": target, "policy": role, "options": options}


def token_step(api_id: str, token: str, index: int = 0, **args) -> ExecutionStep:
    return ExecutionStep(ToolCallRequest(api_id, args), ToolResponse("success", {"token": token}, 3), index)


# ---------------------------------------------------------------------------
# mini-batch


def test_minibatch_from_empty_workflow(registry):
    batch = sample_minibatch(registry, Workflow(), 50, random.Random(1))
    assert len(batch) == 50 and len({a.id for a in batch}) == 50


def test_minibatch_excludes_used_apis(registry):
    used = registry.ids()[:5]
    w = Workflow()
    for a in used:
        w = workflow_add(w, step(a), NEW_CHAIN)
    batch = sample_minibatch(registry, w, 80, random.Random(1))
    assert len(batch) == 75 and not {a.id for a in batch} & set(used)
    assert len(sample_minibatch(registry, w, 80, random.Random(1), allow_reuse=True)) == 80


def test_minibatch_is_seeded(registry):
    a = sample_minibatch(registry, Workflow(), 10, random.Random(9))
    b = sample_minibatch(registry, Workflow(), 10, random.Random(9))
    assert a == b


# ---------------------------------------------------------------------------
# proposer


@pytest.fixture
def small():
    return Registry.of([api(f"a{i}", "q") for i in range(6)])


def proposals_for(names, small, m=3):
    gw = gateway([reply("proposer", {"apis": [{"name": n, "instruction": "do"} for n in names]})])
    led = CostLedger()
    out = propose(list(small), Workflow(), m, gw, led)
    assert led.calls("proposer") == 1
    return [p.api_id for p in out]


def test_two_valid_proposals(small):
    assert proposals_for(["a1", "a4"], small) == ["a1", "a4"]


def test_proposals_truncated_to_m(small):
    assert proposals_for(["a0", "a1", "a2", "a3", "a4"], small) == ["a0", "a1", "a2"]


def test_proposal_outside_batch_dropped(small):
    assert proposals_for(["zz", "a2", "`a3`", "a2"], small) == ["a2", "a3"]


def test_empty_proposal_list(small):
    assert proposals_for([], small) == []
    gw = gateway([reply("proposer", {"apis": None})])
    assert propose(list(small), Workflow(), 3, gw, CostLedger()) == []


def test_propose_needs_batch():
    with pytest.raises(ValueError):
        propose([], Workflow(), 3, gateway(), CostLedger())


# ---------------------------------------------------------------------------
# executor


def test_three_proposals_all_succeed(small):
    led = CostLedger()
    props = [Proposal(f"a{i}", "call it") for i in range(3)]
    reports = execute_proposals(props, small, gateway(), sim(small), led)
    assert [r.success for r in reports] == [True] * 3
    assert [r.proposal for r in reports] == props
    assert led.executor_sessions == 3 and led.calls("executor") == 3 and led.tool_calls == 3


def test_unsolvable_proposal_reports_failure(small):
    led = CostLedger()
    props = [Proposal("a0", "x"), Proposal("a1", "x")]
    reports = execute_proposals(props, small, gateway(), sim(small, unsolvable=["a1"]), led)
    assert reports[0].success and not reports[1].success
    assert reports[1].successful_step is None and len(reports[1].history) == 2
    assert led.executor_sessions == 2


def test_zero_proposals_cost_nothing(small):
    led = CostLedger()
    assert execute_proposals([], small, gateway(), sim(small), led) == []
    assert led == CostLedger()


def test_executor_cap_bounds_calls(small):
    gw = gateway([policy("executor", "executor", "system", mode="loop")])
    (rep,) = execute_proposals([Proposal("a0", "x")], small, gw, sim(small), CostLedger(), cap=4)
    assert not rep.success and len(rep.history) == 4


def test_report_cites_wrong_step_falls_back_to_last_success():
    hist = [step("a", ok=False), step("a", index=1), step("a", ok=False, index=2)]
    text = json.dumps({"success": True, "justification": "ok", "successful_step": 2})
    rep = build_report(Proposal("a", "x"), SessionResult(hist, text))
    assert rep.success and rep.successful_step.step_index == 1


def test_report_success_without_successful_call_is_failure():
    text = json.dumps({"success": True, "justification": "ok", "successful_step": 0})
    rep = build_report(Proposal("a", "x"), SessionResult([step("a", ok=False)], text))
    assert not rep.success


def test_report_unparsable_is_failure():
    rep = build_report(Proposal("a", "x"), SessionResult([step("a")], "sure"))
    assert not rep.success and "unparsable" in rep.justification


# ---------------------------------------------------------------------------
# selector


def failed_report(api_id: str) -> ExecutionReport:
    return ExecutionReport(Proposal(api_id, "x"), (step(api_id, ok=False),), False, "failed")


def ok_report(s: ExecutionStep) -> ExecutionReport:
    return ExecutionReport(Proposal(s.api_id, "x"), (s,), True, "fine", 0)


def test_all_failed_abstains_without_a_call():
    led = CostLedger()
    sel = select([failed_report("a"), failed_report("b")], Workflow(), gateway(), led)
    assert not sel.is_pick and led.calls("selector") == 0


def test_dependent_report_appends_to_producing_chain():
    w = workflow_add(Workflow(), token_step("a", "tok-aaaaaaaaaa"), NEW_CHAIN)
    w = workflow_add(w, token_step("b", "tok-bbbbbbbbbb"), NEW_CHAIN)
    reports = [failed_report("c"), ok_report(token_step("d", "tok-dddddddddd", id="tok-bbbbbbbbbb"))]
    led = CostLedger()
    sel = select(reports, w, gateway(), led)
    assert sel == Selection("pick", 1, 1) and led.calls("selector") == 1
    w2 = apply_selection(w, sel, reports)
    assert [s.api_id for s in w2.chains[1].steps] == ["b", "d"]


def test_independent_report_starts_new_chain():
    w = workflow_add(Workflow(), token_step("a", "tok-aaaaaaaaaa"), NEW_CHAIN)
    sel = select([ok_report(token_step("d", "tok-dddddddddd", q="x"))], w, gateway(), CostLedger())
    assert sel == Selection("pick", 0, NEW_CHAIN)


def sel_reply(**kw) -> list[dict]:
    body = {"decision": "pick", "report_index": 0, "operation": "append", "chain_index": 0} | kw
    return [reply("selector", body)]


def test_out_of_range_chain_becomes_new_chain():
    w = workflow_add(Workflow(), step("a"), NEW_CHAIN)
    sel = select([ok_report(step("b"))], w, gateway(sel_reply(chain_index=9)), CostLedger())
    assert sel == Selection("pick", 0, NEW_CHAIN)


def test_pick_of_failed_report_abstains():
    reports = [failed_report("a"), ok_report(step("b"))]
    sel = select(reports, Workflow(), gateway(sel_reply(report_index=0)), CostLedger())
    assert not sel.is_pick


def test_unusable_selector_output_abstains():
    rules = [{"match": "prefix", "pattern": head("selector"), "target": "first", "reply": "no idea"}]
    assert not select([ok_report(step("b"))], Workflow(), gateway(rules), CostLedger()).is_pick


# ---------------------------------------------------------------------------
# inverse prediction


def test_inverse_needs_nonempty_workflow():
    with pytest.raises(ValueError):
        inverse_predict(Workflow(), gateway(), CostLedger())


def test_inverse_rejects_blank_output():
    w = workflow_add(Workflow(), step("a"), NEW_CHAIN)
    gw = gateway([{"match": "prefix", "pattern": "Given the following API usage chains:", "target": "first",
                   "reply": json.dumps({"query": " ", "response": "r"})}])
    with pytest.raises(InversePredictionError):
        inverse_predict(w, gw, CostLedger())


def test_inverse_query_mentions_every_step():
    w = workflow_add(Workflow(), token_step("a", "tok-aaaaaaaaaa", city="Oslo"), NEW_CHAIN)
    w = workflow_add(w, token_step("b", "tok-bbbbbbbbbb", x="tok-aaaaaaaaaa"), 0)
    led = CostLedger()
    q, r = inverse_predict(w, gateway(), led)
    assert [a for a, _ in parse_tasks(q)] == ["a", "b"]
    assert "tok-bbbbbbbbbb" in r and led.calls("updater") == 1


# ---------------------------------------------------------------------------
# full run


def test_default_run_passes(registry):
    s = run_sample(RunConfig(seed=5), registry, gateway(), sim(registry, failure_rate=0.1))
    assert s.passed and 1 <= s.workflow.size <= 10
    assert s.ledger.executor_sessions <= 30 and s.ledger.generation_llm_calls <= 60
    assert s.ledger.calls("updater") == s.workflow.size
    assert [a for a, _ in parse_tasks(s.query)] == [st.api_id for c in s.workflow.chains for st in c.steps]


def test_forced_abstain_yields_failed_sample(registry):
    gw = gateway([policy("selector", "selector", abstain=True)])
    s = run_sample(RunConfig(T=4, seed=1), registry, gw, sim(registry))
    assert not s.passed and s.workflow.is_empty()
    assert s.ledger.calls("updater") == 0 and s.ledger.calls("selector") == 4


def test_zero_proposals_skip_the_rest(registry):
    gw = gateway([reply("proposer", {"apis": []})])
    s = run_sample(RunConfig(T=3, keep_trace=True), registry, gw, sim(registry))
    assert s.ledger.calls("proposer") == 3 and s.ledger.executor_sessions == 0
    assert s.ledger.calls("selector") == 0 and not s.passed
    assert all("no proposals" in rec["notes"] for rec in s.iteration_trace)


def test_backend_outage_propagates(registry):
    class Down:
        identity = "down"

        def complete(self, *a, **kw):
            raise TransportError("refused")

    with pytest.raises(BackendUnavailable):
        run_sample(RunConfig(T=2), registry, Gateway(Down(), sleep=lambda s: None), sim(registry))


def test_deferred_inverse_runs_once(registry):
    s = run_sample(RunConfig(seed=2, inverse_every_iteration=False), registry, gateway(), sim(registry))
    assert s.passed and s.ledger.calls("updater") == 1


def test_same_seed_same_sample(registry):
    a = run_sample(RunConfig(seed=11), registry, gateway(), sim(registry, failure_rate=0.2))
    b = run_sample(RunConfig(seed=11), registry, gateway(), sim(registry, failure_rate=0.2))
    assert a == b


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(m=st.integers(1, 4), T=st.integers(1, 6), seed=st.integers(0, 10_000), fail=st.sampled_from([0.0, 0.3, 0.9]))
def test_budget_and_replay(registry, m, T, seed, fail):
    cfg = RunConfig(m=m, bs=12, T=T, seed=seed, keep_trace=True)
    s = run_sample(cfg, registry, gateway(), sim(registry, failure_rate=fail, seed=seed))
    led = s.ledger
    assert led.executor_sessions <= m * T
    assert led.calls("proposer") == T
    assert led.calls("selector") <= T and led.calls("updater") <= T
    assert s.workflow.size <= T
    # replaying the recorded selections rebuilds the final workflow
    w = Workflow()
    for rec in s.iteration_trace:
        reports = [ExecutionReport.from_dict(r) for r in rec["reports"]]
        w = apply_selection(w, Selection.from_dict(rec["selection"]), reports)
    assert w == s.workflow
