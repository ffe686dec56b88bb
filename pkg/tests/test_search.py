import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdprag.core import State
from mdprag.fixtures import random_fixtures
from mdprag.gateway import ModelGateway, ScriptedModel, render_prompt, DEFAULT_INSTRUCTION
from mdprag.search import (
    MINIMAL,
    MOST,
    Random,
    SearchBudget,
    SearchLog,
    enumerate_all,
    policy_from_name,
    synthesize,
)

BUDGET = SearchBudget(max_depth=8)


def run(plan, index, model, policy=MINIMAL, budget=BUDGET, k=3, log=None):
    return synthesize(plan.question, ModelGateway.single(model), index, budget, k, policy, log=log)


def test_zero_retrieval_when_parametric_suffices(demo_plans, demo_index, demo_model):
    traj = run(demo_plans["q2"], demo_index, demo_model)
    assert traj.correct and traj.retrieval_count == 0
    assert traj.final_answer == "Paris" and len(traj.steps) == 2


def test_no_decomposition_question(demo_plans, demo_index, demo_model):
    traj = run(demo_plans["q6"], demo_index, demo_model)
    assert traj.steps == () and traj.final_answer == "Au"


def test_retrieval_at_first_step(demo_plans, demo_index, demo_model):
    plan = demo_plans["q3"]
    traj = run(plan, demo_index, demo_model)
    assert traj.retrieval_count == 1
    assert [s.retrieved for s in traj.steps] == [True, False]
    everything = enumerate_all(plan.question, ModelGateway.single(demo_model), demo_index, BUDGET, 3)
    assert min(t.retrieval_count for t in everything if t.correct) == 1


def test_all_wrong_returns_none(demo_plans, demo_index, demo_model):
    log = SearchLog("q4", "minimal")
    assert run(demo_plans["q4"], demo_index, demo_model, log=log) is None
    assert log.outcome == "queue_empty"
    assert any(e["event"] == "verdict" and e["correct"] is False for e in log.events)


def test_enumerate_two_step_tree(demo_plans, demo_index, demo_model):
    trajs = enumerate_all(demo_plans["q2"].question, ModelGateway.single(demo_model), demo_index, BUDGET, 3)
    assert len(trajs) == 4
    assert sorted(t.retrieval_count for t in trajs) == [0, 1, 1, 2]
    assert all(t.correct for t in trajs)


def test_budget_exhaustion_is_reported(demo_plans, demo_index, demo_model):
    log = SearchLog("q5", "minimal")
    assert run(demo_plans["q5"], demo_index, demo_model, budget=SearchBudget(8, 2, 256), log=log) is None
    assert log.outcome == "budget_exhausted"
    log = SearchLog("q5", "minimal")
    assert run(demo_plans["q5"], demo_index, demo_model, budget=SearchBudget(8, 64, 3), log=log) is None
    assert log.outcome == "budget_exhausted"


def test_malformed_emission_prunes_node(demo_index, demo_plans):
    q = demo_plans["q6"].question
    key = render_prompt(DEFAULT_INSTRUCTION, State(q, (), 8)).key
    log = SearchLog(q.id, "minimal")
    out = synthesize(q, ModelGateway.single(ScriptedModel({key: "no markers here"})), demo_index, BUDGET, 3, log=log)
    assert out is None
    assert [e["stage"] for e in log.events if e["event"] == "malformed"] == ["opening"]


def test_depth_cap_forces_final(demo_plans, demo_index):
    from mdprag.fixtures import build_script

    plan = demo_plans["q5"]
    model = build_script([plan], demo_index, k=3, max_depth=2).model()
    trajs = enumerate_all(plan.question, ModelGateway.single(model), demo_index, SearchBudget(max_depth=2), 3)
    assert trajs and all(t.depth_forced and len(t.steps) == 2 and not t.correct for t in trajs)


def test_most_picks_maximum(demo_plans, demo_index, demo_model):
    log = SearchLog("q2", "most")
    traj = run(demo_plans["q2"], demo_index, demo_model, MOST, log=log)
    assert traj.retrieval_count == 2
    counts = log.dequeued_counts()
    assert counts == sorted(counts, reverse=True)


def test_random_policy_seeded(demo_plans, demo_index, demo_model):
    got = {run(demo_plans["q2"], demo_index, demo_model, Random(s)).retrieval_count for s in range(20)}
    assert got <= {0, 1, 2} and len(got) > 1
    a = run(demo_plans["q2"], demo_index, demo_model, Random(3))
    b = run(demo_plans["q2"], demo_index, demo_model, Random(3))
    assert a == b


def test_policy_from_name():
    assert policy_from_name("minimal") is MINIMAL
    assert policy_from_name("random", 4) == Random(4)
    with pytest.raises(ValueError):
        policy_from_name("greedy")


FIXTURES = random_fixtures(seed=11, count=40)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FIXTURES))
def test_minimal_matches_exhaustive_oracle(fx):
    budget = SearchBudget(max_depth=fx.max_depth)
    gw = ModelGateway.single(fx.model)
    log = SearchLog(fx.plan.question.id, "minimal")
    found = synthesize(fx.plan.question, gw, fx.index, budget, fx.k, log=log)
    correct = [t for t in enumerate_all(fx.plan.question, gw, fx.index, budget, fx.k) if t.correct]
    if not correct:
        assert found is None and log.outcome == "queue_empty"
    else:
        assert found.correct
        assert found.retrieval_count == min(t.retrieval_count for t in correct)
        assert found.retrieval_count <= fx.max_depth
    counts = log.dequeued_counts()
    assert counts == sorted(counts)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(FIXTURES))
def test_search_is_deterministic(fx):
    budget = SearchBudget(max_depth=fx.max_depth)
    logs = [SearchLog("x", "minimal"), SearchLog("x", "minimal")]
    outs = [synthesize(fx.plan.question, ModelGateway.single(fx.model), fx.index, budget, fx.k, log=lg) for lg in logs]
    assert outs[0] == outs[1]
    assert logs[0].events == logs[1].events
