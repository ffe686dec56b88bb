from __future__ import annotations

from pathlib import Path

import pytest

from mdprag.core import Document, Parametric, QAInstance, Retrieved, State, Trajectory, append_step
from mdprag.fixtures import DEMO_DIR, build_script, load_plans
from mdprag.gateway import ModelGateway
from mdprag.retriever import build_index, read_corpus

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def demo_index():
    return build_index(read_corpus(DEMO_DIR / "corpus.tsv"))


@pytest.fixture(scope="session")
def demo_plans():
    return {p.question.id: p for p in load_plans(DEMO_DIR / "plans.jsonl")}


@pytest.fixture(scope="session")
def demo_model(demo_index, demo_plans):
    return build_script(demo_plans.values(), demo_index, k=3, max_depth=8).model()


@pytest.fixture
def demo_gateway(demo_model):
    return ModelGateway.single(demo_model)


@pytest.fixture
def question():
    return QAInstance("q", "Who directed Inception and when was he born?", ("30 July 1970",))


def doc(i: int, body: str | None = None) -> Document:
    return Document(f"d{i}", f"Title {i}", body or f"Body text of document number {i} about something.")


def make_trajectory(question: QAInstance, pattern: str, final: str = "30 July 1970", correct: bool | None = True) -> Trajectory:
    """pattern: one char per step, 'p' parametric or 'r' retrieved."""
    state = State(question, (), max(8, len(pattern)))
    for i, c in enumerate(pattern):
        if c == "r":
            resp = Retrieved((doc(2 * i), doc(2 * i + 1)), f"answer {i}")
        else:
            resp = Parametric(f"answer {i}")
        state = append_step(state, f"subquery number {i}?", resp)
    return Trajectory(state, final, correct)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
