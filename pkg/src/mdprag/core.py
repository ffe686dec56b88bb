"""MDP domain model: questions, states, responses, trajectories and rewards.

All values are frozen; ``append_step`` returns a new state and leaves its
argument untouched, so states can be shared across search branches and
worker threads freely.
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass
from typing import Any, Iterable, Union

DEFAULT_MAX_DEPTH = 8


class DepthExceeded(Exception):
    """Raised when appending to a state that already holds ``max_depth`` steps."""


@dataclass(frozen=True)
class QAInstance:
    id: str
    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.question.strip():
            raise ValueError(f"question {self.id!r} is empty")
        if not self.gold_answers or any(not a.strip() for a in self.gold_answers):
            raise ValueError(f"question {self.id!r} needs at least one non-empty gold answer")

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> QAInstance:
        return cls(id=str(obj["id"]), question=obj["question"], gold_answers=tuple(obj["answers"]))

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "question": self.question, "answers": list(self.gold_answers)}


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    score: float = 0.0

    def __post_init__(self) -> None:
        if self.score < 0:
            raise ValueError(f"negative score for {self.doc_id}")


@dataclass(frozen=True)
class Parametric:
    """Intermediate answer produced from the model's own knowledge."""

    answer: str

    def __post_init__(self) -> None:
        if not self.answer.strip():
            raise ValueError("answer must be non-empty")


@dataclass(frozen=True)
class Retrieved:
    """Intermediate answer produced after reading retrieved documents."""

    documents: tuple[Document, ...]
    answer: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "documents", tuple(self.documents))
        if not self.documents:
            raise ValueError("a retrieved response needs at least one document")
        if not self.answer.strip():
            raise ValueError("answer must be non-empty")


Response = Union[Parametric, Retrieved]


@dataclass(frozen=True)
class Step:
    subquery: str
    response: Response

    @property
    def retrieved(self) -> bool:
        return isinstance(self.response, Retrieved)


@dataclass(frozen=True)
class State:
    question: QAInstance
    steps: tuple[Step, ...] = ()
    max_depth: int = DEFAULT_MAX_DEPTH

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if len(self.steps) > self.max_depth:
            raise DepthExceeded(f"{len(self.steps)} steps exceed max depth {self.max_depth}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def at_depth_limit(self) -> bool:
        return len(self.steps) >= self.max_depth

    def key(self) -> tuple:
        """Hashable identity of the partial solution, used for memoisation."""
        return (
            self.question.id,
            tuple(
                (
                    s.subquery,
                    s.response.answer,
                    tuple(d.doc_id for d in s.response.documents) if isinstance(s.response, Retrieved) else None,
                )
                for s in self.steps
            ),
        )


def append_step(state: State, subquery: str, response: Response) -> State:
    if not subquery.strip():
        raise ValueError("subquery must be non-empty")
    if state.at_depth_limit:
        raise DepthExceeded(f"state already holds {state.max_depth} steps")
    return State(state.question, state.steps + (Step(subquery, response),), state.max_depth)


def retrieval_count(state: State) -> int:
    return sum(1 for s in state.steps if isinstance(s.response, Retrieved))


class Termination(enum.Enum):
    CONTINUE = "continue"
    TERMINATE = "terminate"


class Atomic(enum.Enum):
    RETRIEVE = "retrieve"
    PARAMETRIC = "parametric"


@dataclass(frozen=True)
class Action:
    termination: Termination
    atomic: Atomic | None = None

    def __post_init__(self) -> None:
        if self.termination is Termination.TERMINATE and self.atomic is not None:
            raise ValueError("a terminate action carries no atomic decision")
        if self.termination is Termination.CONTINUE and self.atomic is None:
            raise ValueError("a continue action needs an atomic decision")


def actions_of(state: State) -> list[Action]:
    """The action sequence that produced a terminal ``state``."""
    out = [
        Action(Termination.CONTINUE, Atomic.RETRIEVE if s.retrieved else Atomic.PARAMETRIC)
        for s in state.steps
    ]
    out.append(Action(Termination.TERMINATE))
    return out


@dataclass(frozen=True)
class Trajectory:
    state: State
    final_answer: str
    correct: bool | None = None
    # final answer was forced because the state hit max_depth
    depth_forced: bool = False

    @property
    def retrieval_count(self) -> int:
        return retrieval_count(self.state)

    @property
    def steps(self) -> tuple[Step, ...]:
        return self.state.steps

    def judged(self, correct: bool) -> Trajectory:
        return Trajectory(self.state, self.final_answer, correct, self.depth_forced)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.state.question.id,
            "question": self.state.question.question,
            "steps": [
                {
                    "subquery": s.subquery,
                    "retrieved": s.retrieved,
                    "doc_ids": [d.doc_id for d in s.response.documents] if isinstance(s.response, Retrieved) else [],
                    "answer": s.response.answer,
                }
                for s in self.state.steps
            ],
            "final_answer": self.final_answer,
            "retrieval_count": self.retrieval_count,
            "correct": self.correct,
            "depth_forced": self.depth_forced,
        }

    @classmethod
    def from_json(
        cls,
        obj: dict[str, Any],
        question: QAInstance | None = None,
        documents: dict[str, Document] | None = None,
        max_depth: int = DEFAULT_MAX_DEPTH,
    ) -> Trajectory:
        """Rebuild a trajectory from its JSON form.

        Only document ids are serialised, so bodies are restored from
        ``documents`` when given and left empty otherwise. Without a
        ``question`` the gold answers are unknown and a placeholder alias
        equal to the final answer is used.
        """
        documents = documents or {}
        if question is None:
            question = QAInstance(obj["id"], obj["question"], (obj["final_answer"] or "?",))
        steps = []
        for s in obj["steps"]:
            if s["retrieved"]:
                docs = tuple(documents.get(i, Document(i, "", "")) for i in s["doc_ids"])
                steps.append(Step(s["subquery"], Retrieved(docs, s["answer"])))
            else:
                steps.append(Step(s["subquery"], Parametric(s["answer"])))
        state = State(question, tuple(steps), max(max_depth, len(steps)))
        traj = cls(state, obj["final_answer"], obj.get("correct"), obj.get("depth_forced", False))
        if traj.retrieval_count != obj.get("retrieval_count", traj.retrieval_count):
            raise ValueError(f"retrieval_count mismatch in trajectory {obj['id']}")
        return traj


@functools.total_ordering
@dataclass(frozen=True)
class Reward:
    """Terminal reward: any correct answer beats any incorrect one, and fewer
    retrievals beat more among correct answers.

    The infinite penalty for a wrong answer is the bottom element of the
    order rather than a float, so no arithmetic on infinities is needed.
    """

    correct: bool
    retrieval_count: int | None = None

    def __post_init__(self) -> None:
        if self.correct and (self.retrieval_count is None or self.retrieval_count < 0):
            raise ValueError("a correct reward needs a non-negative retrieval count")
        if not self.correct and self.retrieval_count is not None:
            raise ValueError("an incorrect reward carries no retrieval count")

    @classmethod
    def incorrect(cls) -> Reward:
        return cls(False)

    @classmethod
    def of_correct(cls, retrieval_count: int) -> Reward:
        return cls(True, retrieval_count)

    def _rank(self) -> tuple[int, int]:
        if not self.correct:
            return (0, 0)
        return (1, -self.retrieval_count)

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Reward):
            return NotImplemented
        return self._rank() < other._rank()


def trajectory_reward(traj: Trajectory, gold: QAInstance, matcher) -> Reward:
    """Score a finished trajectory; ``matcher(prediction, golds) -> bool``."""
    if matcher(traj.final_answer, list(gold.gold_answers)):
        return Reward.of_correct(traj.retrieval_count)
    return Reward.incorrect()


def rl_shaped_reward(answer_correct: bool, format_ok: bool, retrieve_count: int) -> float:
    if retrieve_count < 0:
        raise ValueError("retrieve_count must be non-negative")
    if answer_correct:
        return 1.0 - 0.1 * min(5, retrieve_count)
    return 0.1 if format_ok else 0.0


def read_trajectories(lines: Iterable[str], **kwargs) -> list[Trajectory]:
    return [Trajectory.from_json(json.loads(line), **kwargs) for line in lines if line.strip()]
