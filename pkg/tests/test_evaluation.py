import json
import random
import statistics
from dataclasses import replace

import pytest
from conftest import api, gateway, sim, step
from hypothesis import given
from hypothesis import strategies as st

from toolgrad.engine import RunConfig, run_sample
from toolgrad.evaluation import (
    FRAMEWORKS,
    EvalConfig,
    EvalRecord,
    aggregate_report,
    drive_react,
    drive_standard,
    evaluate_sample,
    format_table,
    presented_tools,
    qor_score,
    recompute_final,
    success_rate,
    tool_recall,
)
from toolgrad.llm.policies import format_tasks
from toolgrad.models import NEW_CHAIN, CostLedger, Sample, Workflow, workflow_add
from toolgrad.negatives import hashed_index, sample_negatives
from toolgrad.prompts import template
from toolgrad.simdata import synthetic_apis
from toolgrad.tools import Registry


def head(name: str) -> str:
    return template(name).split("\n", 1)[0]


def judge_reply(tasks: int, scores: list, final: float = 0.0) -> dict:
    body = {"tasks_identified": tasks, "per_task_scores": scores, "final_score": final}
    return {"match": "prefix", "pattern": head("judge"), "target": "first", "reply": json.dumps(body)}


def test_recall_examples():
    assert tool_recall(["a", "b", "x"], ["a", "b", "c", "d"]) == 50.0
    assert tool_recall([], ["a"]) == 0.0
    assert tool_recall(["a", "a"], ["a"]) == 100.0
    with pytest.raises(ValueError):
        tool_recall(["a"], [])


def test_success_counts_only_ok_calls():
    steps = [step("a"), step("b", ok=False), step("c", ok=False), step("c")]
    assert success_rate(steps, ["a", "b", "c", "d"]) == 50.0
    assert tool_recall([s.api_id for s in steps], ["a", "b", "c", "d"]) == 75.0


@given(
    st.lists(st.tuples(st.sampled_from("abcdefg"), st.booleans()), max_size=12),
    st.sets(st.sampled_from("abcdefg"), min_size=1),
)
def test_success_never_exceeds_recall(calls, gt):
    steps = [step(a, ok=ok, index=i) for i, (a, ok) in enumerate(calls)]
    assert success_rate(steps, gt) <= tool_recall([s.api_id for s in steps], gt)


def test_final_score_recomputed_over_identified_tasks():
    assert recompute_final(5, [80, 90, 70]) == 48.0
    assert recompute_final(2, [150, -5]) == 50.0
    assert recompute_final(0, []) == 0.0
    assert recompute_final(1, [40, 60]) == 50.0


def test_judge_final_score_is_recomputed():
    led = CostLedger()
    gw = gateway([judge_reply(5, [80, 90, 70], final=99.0)])
    assert qor_score("q", [step("a")], "reply", "gt", gw, led) == 48.0
    assert led.calls("judge") == 1


def test_all_failed_trace_scores_zero():
    led = CostLedger()
    gw = gateway([judge_reply(1, [100], 100)])
    assert qor_score("q", [step("a", ok=False)], "reply", "gt", gw, led) == 0.0
    assert led.calls("judge") == 1


def test_empty_reply_scores_zero_without_judge():
    led = CostLedger()
    assert qor_score("q", [step("a")], "  ", "gt", gateway(), led) == 0.0
    assert led.calls("judge") == 0


@pytest.fixture(scope="module")
def case():
    reg = Registry.of(synthetic_apis(80, seed=3))
    s = run_sample(RunConfig(seed=5), reg, gateway(), sim(reg))
    assert s.passed
    neg = sample_negatives(s.positive_api_ids, reg, hashed_index(reg), 20)
    return reg, replace(s, negative_api_ids=tuple(neg), sample_id="tg-000000")


def test_standard_uses_one_agent_call(case):
    reg, s = case
    rec = drive_standard(s, reg, gateway(), sim(reg))
    assert rec.llm_steps == 1 and rec.ledger.calls("agent") == 1
    assert {c.api_id for c in rec.predicted_calls} == set(s.positive_api_ids)


def test_react_three_calls_then_answer():
    reg = Registry.of([api("a", "q"), api("b", "q"), api("c", "q"), api("n1", "q")])
    w = Workflow()
    for i in "abc":
        w = workflow_add(w, step(i, q=f"v-{i}"), NEW_CHAIN)
    s = Sample(format_tasks([(i, {"q": f"v-{i}"}) for i in "abc"]), w, "r", ("n1",), sample_id="x", passed=True)
    rec = drive_react(s, reg, gateway(), sim(reg))
    assert rec.llm_steps == 4 and len(rec.predicted_calls) == 3 and rec.flags == []


def test_react_cap_flags_exhaustion(case):
    reg, s = case
    loop = {"match": "prefix", "pattern": head("agent_react"), "target": "system", "policy": "agent",
            "options": {"mode": "loop"}}
    rec = drive_react(s, reg, gateway([loop]), sim(reg), cap=10)
    assert rec.llm_steps == 10 and rec.flags == ["cap_exhausted"]


def test_evaluate_all_frameworks(case):
    reg, s = case
    order = []
    for fw in FRAMEWORKS:
        rec = evaluate_sample(s, fw, reg, gateway(), sim(reg), gateway(), gateway())
        if fw != "dfs":  # depth 6 cannot cover a longer workflow
            assert rec.recall == 100.0 and rec.success_rate == 100.0 and rec.qor == 100.0
        assert rec.ledger.calls("writer") == 1 and rec.ledger.calls("judge") == 1
        assert EvalRecord.from_dict(rec.to_dict()) == rec
        order.append(rec.llm_steps)
    assert order == sorted(order)


def test_unparsable_judge_flagged(case):
    reg, s = case
    bad = {"match": "prefix", "pattern": head("judge"), "target": "first", "reply": "great answer"}
    rec = evaluate_sample(s, "standard", reg, gateway(), sim(reg), gateway(), gateway([bad]), EvalConfig())
    assert rec.qor is None and "judge_unparsable" in rec.flags


def test_silent_agent_makes_no_calls(case):
    reg, s = case
    silent = {"match": "prefix", "pattern": head("agent_standard"), "target": "system", "policy": "agent",
              "options": {"mode": "silent"}}
    rec = evaluate_sample(s, "standard", reg, gateway([silent]), sim(reg), gateway(), gateway())
    assert rec.recall == 0.0 and rec.qor == 0.0 and rec.flags == ["no_calls"]


def test_presented_tools_shuffle_is_seeded(case):
    reg, s = case
    a = [t.id for t in presented_tools(s, reg)]
    assert a == [t.id for t in presented_tools(s, reg)]
    assert sorted(a) == sorted(set(s.positive_api_ids) | set(s.negative_api_ids))
    orders = {tuple(t.id for t in presented_tools(s, reg, seed=k)) for k in range(5)}
    assert len(orders) > 1


def test_aggregate_matches_hand_computation():
    rng = random.Random(3)
    recs = []
    for i in range(20):
        recall = rng.choice([0.0, 25.0, 50.0, 100.0])
        recs.append(EvalRecord(f"s{i}", FRAMEWORKS[i % 3], [step("a")] * rng.randint(0, 3), recall=recall,
                               success_rate=recall / 2, qor=None if i % 7 == 0 else rng.uniform(0, 100),
                               llm_steps=rng.randint(1, 30)))
    summary = aggregate_report(recs)
    for fw in FRAMEWORKS:
        rs = [r for r in recs if r.framework == fw]
        assert summary[fw]["count"] == len(rs)
        assert summary[fw]["recall"] == pytest.approx(statistics.fmean(r.recall for r in rs))
        assert summary[fw]["success_rate"] == pytest.approx(statistics.fmean(r.success_rate for r in rs))
        assert summary[fw]["qor"] == pytest.approx(statistics.fmean(r.qor for r in rs if r.qor is not None))
        assert summary[fw]["llm_steps"] == pytest.approx(statistics.fmean(r.llm_steps for r in rs))
        assert summary[fw]["tool_calls"] == pytest.approx(statistics.fmean(len(r.predicted_calls) for r in rs))
    table = format_table(summary)
    assert all(fw in table for fw in FRAMEWORKS)


def test_aggregate_needs_records():
    with pytest.raises(ValueError):
        aggregate_report([])


def test_unknown_framework_rejected():
    with pytest.raises(ValueError):
        EvalRecord("s", "cot")
