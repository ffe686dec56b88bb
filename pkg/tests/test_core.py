import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import doc, make_trajectory
from mdprag.core import (
    Action,
    Atomic,
    DepthExceeded,
    Parametric,
    QAInstance,
    Retrieved,
    Reward,
    State,
    Termination,
    Trajectory,
    actions_of,
    append_step,
    retrieval_count,
    rl_shaped_reward,
    trajectory_reward,
)
from mdprag.metrics import exact_match


def test_qa_instance_validation():
    with pytest.raises(ValueError):
        QAInstance("x", "   ", ("a",))
    with pytest.raises(ValueError):
        QAInstance("x", "q?", ())
    with pytest.raises(ValueError):
        QAInstance("x", "q?", ("a", " "))


def test_append_step_examples(question):
    s0 = State(question)
    s1 = append_step(s0, "Who directed Inception?", Parametric("Christopher Nolan"))
    assert len(s1) == 1 and retrieval_count(s1) == 0
    s2 = append_step(s1, "When was he born?", Retrieved((doc(1),), "1970"))
    assert len(s2) == 2 and retrieval_count(s2) == 1
    # value semantics: parents untouched
    assert len(s0) == 0 and len(s1) == 1


def test_append_step_depth_cap(question):
    s = State(question, (), max_depth=2)
    s = append_step(s, "a?", Parametric("x"))
    s = append_step(s, "b?", Parametric("y"))
    with pytest.raises(DepthExceeded):
        append_step(s, "c?", Parametric("z"))


def test_append_step_rejects_empty_subquery(question):
    with pytest.raises(ValueError):
        append_step(State(question), "  ", Parametric("x"))


def test_response_invariants():
    with pytest.raises(ValueError):
        Retrieved((), "x")
    with pytest.raises(ValueError):
        Parametric("")


@pytest.mark.parametrize("pattern,expected", [("", 0), ("prp", 1), ("rr", 2)])
def test_retrieval_count(question, pattern, expected):
    assert retrieval_count(make_trajectory(question, pattern).state) == expected


def test_action_invariants():
    with pytest.raises(ValueError):
        Action(Termination.TERMINATE, Atomic.RETRIEVE)
    with pytest.raises(ValueError):
        Action(Termination.CONTINUE)
    traj = make_trajectory(QAInstance("q", "q?", ("a",)), "pr")
    assert [a.atomic for a in actions_of(traj.state)] == [Atomic.PARAMETRIC, Atomic.RETRIEVE, None]


step_kinds = st.lists(st.booleans(), max_size=8)


@given(step_kinds, st.booleans())
def test_prefix_preservation_and_count(kinds, retrieve):
    q = QAInstance("q", "q?", ("a",))
    s = State(q, (), 9)
    for i, r in enumerate(kinds):
        s = append_step(s, f"q{i}", Retrieved((doc(i),), "a") if r else Parametric("a"))
    child = append_step(s, "next", Retrieved((doc(99),), "b") if retrieve else Parametric("b"))
    assert child.steps[: len(s)] == s.steps
    assert retrieval_count(child) == retrieval_count(s) + (1 if retrieve else 0)


def test_trajectory_reward_ordering(question):
    one = trajectory_reward(make_trajectory(question, "rp"), question, exact_match)
    two = trajectory_reward(make_trajectory(question, "rr"), question, exact_match)
    assert one > two
    wrong = trajectory_reward(make_trajectory(question, "", final="no"), question, exact_match)
    five = trajectory_reward(make_trajectory(question, "rrrrr"), question, exact_match)
    assert wrong == Reward.incorrect()
    assert five > wrong
    assert trajectory_reward(make_trajectory(question, "rp"), question, exact_match) == one


rewards = st.one_of(st.just(Reward.incorrect()), st.integers(0, 20).map(Reward.of_correct))


@given(rewards, rewards, rewards)
def test_reward_total_order(a, b, c):
    assert (a < b) + (a == b) + (a > b) == 1
    if a <= b and b <= a:
        assert a == b
    if a <= b and b <= c:
        assert a <= c


def test_rl_shaped_reward_branches():
    assert rl_shaped_reward(False, False, 3) == 0.0
    assert rl_shaped_reward(False, True, 0) == 0.1
    assert rl_shaped_reward(True, False, 2) == 0.8
    assert rl_shaped_reward(True, True, 2) == 0.8
    assert rl_shaped_reward(True, True, 7) == 0.5


@given(st.integers(0, 50), st.booleans())
def test_rl_reward_monotone_and_capped(n, fmt):
    r = rl_shaped_reward(True, fmt, n)
    assert 0.0 <= r <= 1.0
    assert rl_shaped_reward(True, fmt, n + 1) <= r
    if n >= 5:
        assert r == rl_shaped_reward(True, fmt, 5)


def test_trajectory_json_roundtrip(question):
    traj = make_trajectory(question, "prp", correct=True)
    obj = json.loads(json.dumps(traj.to_json()))
    assert set(obj) >= {"id", "question", "steps", "final_answer", "retrieval_count", "correct"}
    assert obj["retrieval_count"] == 1
    assert obj["steps"][1] == {"subquery": "subquery number 1?", "retrieved": True, "doc_ids": ["d2", "d3"], "answer": "answer 1"}
    docs = {d.doc_id: d for s in traj.steps if s.retrieved for d in s.response.documents}
    back = Trajectory.from_json(obj, question=question, documents=docs)
    assert back.state.steps == traj.state.steps
    assert back.final_answer == traj.final_answer and back.correct is True


def test_trajectory_json_rejects_inconsistent_count(question):
    obj = make_trajectory(question, "r").to_json()
    obj["retrieval_count"] = 0
    with pytest.raises(ValueError):
        Trajectory.from_json(obj)
