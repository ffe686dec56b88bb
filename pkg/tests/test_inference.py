import json

import pytest

from mdprag.core import QAInstance
from mdprag.gateway import ModelGateway
from mdprag.inference import InferenceMode, InferenceResult, run, run_batch
from mdprag.retriever import CountingIndex
from mdprag.search import SearchBudget

ADAPTIVE = InferenceMode.ADAPTIVE
ALL = InferenceMode.RETRIEVE_EVERY_STEP
NONE = InferenceMode.PARAMETRIC_ONLY


class FnModel:
    """Tiny model whose emission is a function of the request."""

    def __init__(self, fn):
        self.fn = fn
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        return self.fn(request)


def test_adaptive_retrieves_where_model_asks(demo_plans, demo_index, demo_gateway):
    res = run(demo_plans["q1"].question, demo_gateway, demo_index, ADAPTIVE)
    assert not res.failed and res.correct
    assert [s.retrieved for s in res.trajectory.steps] == [False, True]
    assert res.final_answer == "30 July 1970"
    assert res.n_subqueries == 2 and res.n_retrievals == 1


def test_retrieve_every_step(demo_plans, demo_index, demo_gateway):
    res = run(demo_plans["q1"].question, demo_gateway, demo_index, ALL)
    assert all(s.retrieved for s in res.trajectory.steps)
    assert res.n_retrievals == res.n_subqueries == 2 and res.correct


def test_parametric_only_never_searches(demo_plans, demo_index, demo_gateway):
    counting = CountingIndex(demo_index)
    for plan in demo_plans.values():
        res = run(plan.question, demo_gateway, counting, NONE)
        assert res.n_retrievals == 0
    assert counting.searches == 0
    res = run(demo_plans["q1"].question, demo_gateway, demo_index, NONE)
    assert res.final_answer == "1965" and not res.correct


def test_zero_step_answer(demo_plans, demo_index, demo_gateway):
    res = run(demo_plans["q6"].question, demo_gateway, demo_index, ADAPTIVE)
    assert res.trajectory.steps == () and res.final_answer == "Au" and res.model_calls == 1


def test_malformed_retry_then_success():
    def fn(req):
        if req.seed == 0:
            return "gibberish"
        return "So the final answer is: 42"

    model = FnModel(fn)
    res = run(QAInstance("x", "Life?", ("42",)), ModelGateway.single(model), None, seed=0)
    assert res.final_answer == "42" and not res.failed
    assert [r.seed for r in model.requests] == [0, 1]


def test_malformed_twice_is_a_failure():
    res = run(QAInstance("x", "Life?", ("42",)), ModelGateway.single(FnModel(lambda r: "nope")), None)
    assert res.failed and res.final_answer == "" and res.model_calls == 2
    assert "malformed" in res.reason


def test_script_miss_and_budget_are_failures(demo_index, demo_gateway):
    res = run(QAInstance("zz", "Unscripted?", ("a",)), demo_gateway, demo_index)
    assert res.failed
    chatter = FnModel(lambda r: " x" if r.prompt.forced_prefix else f"Follow up: q{len(r.prompt.transcript)}?")
    res = run(QAInstance("y", "Loop?", ("a",)), ModelGateway.single(chatter), None, budget=SearchBudget(max_depth=50, max_model_calls=5))
    assert res.failed and res.model_calls == 5 and len(res.trajectory.steps) == 2


def test_repetition_guard_forces_final():
    def fn(req):
        if req.prompt.forced_prefix == "So the final answer is:":
            return " done"
        return "Follow up: The same thing?\nIntermediate answer: x"

    res = run(QAInstance("r", "Again?", ("done",)), ModelGateway.single(FnModel(fn)), None)
    assert len(res.trajectory.steps) == 1 and res.final_answer == "done" and res.correct


def test_depth_limit_forces_final():
    def fn(req):
        if req.prompt.forced_prefix == "So the final answer is:":
            return " end"
        return f"Follow up: step {req.prompt.transcript.count('Follow up')}?\nIntermediate answer: x"

    res = run(QAInstance("d", "Deep?", ("end",)), ModelGateway.single(FnModel(fn)), None, budget=SearchBudget(max_depth=3))
    assert len(res.trajectory.steps) == 3 and res.trajectory.depth_forced


def test_result_json_roundtrip(demo_plans, demo_index, demo_gateway):
    res = run(demo_plans["q1"].question, demo_gateway, demo_index)
    obj = json.loads(json.dumps(res.to_json()))
    back = InferenceResult.from_json(obj, demo_plans["q1"].question)
    assert back.final_answer == res.final_answer and back.n_retrievals == 1


@pytest.mark.parametrize("jobs", [1, 4])
def test_batch_preserves_order(demo_plans, demo_index, demo_gateway, jobs):
    qs = [p.question for p in demo_plans.values()] * 3
    out = run_batch(qs, demo_gateway, demo_index, jobs=jobs, mode=ADAPTIVE)
    assert [r.question_id for r in out] == [q.id for q in qs]
    assert [r.final_answer for r in out[:6]] == [r.final_answer for r in out[6:12]]
