"""Test-time loop over the MDP with a single model.

``ADAPTIVE`` lets the model decide when to stop and when to retrieve.
``RETRIEVE_EVERY_STEP`` answers every subquery from retrieved documents and
``PARAMETRIC_ONLY`` never touches the index, whatever the model asks for.
"""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Sequence

from .core import Parametric, QAInstance, Retrieved, State, Trajectory, append_step
from .gateway import (
    DEFAULT_INSTRUCTION,
    DEFAULT_MAX_DOC_CHARS,
    BudgetExceeded,
    EndpointUnreachable,
    Final,
    FinalContinuation,
    MalformedTurn,
    ModelGateway,
    ParametricAnswer,
    ParametricContinuation,
    RetrievedContinuation,
    RetrieveMarker,
    ScriptMiss,
    answer_request,
    opening_request,
    parse_answer,
    parse_turn,
    render_prompt,
)
from .metrics import exact_match, normalize_answer
from .search import SearchBudget

logger = logging.getLogger(__name__)


class InferenceMode(enum.Enum):
    ADAPTIVE = "adaptive"
    RETRIEVE_EVERY_STEP = "retrieve-all"
    PARAMETRIC_ONLY = "parametric"


@dataclass(frozen=True)
class InferenceResult:
    question_id: str
    final_answer: str
    trajectory: Trajectory
    model_calls: int
    wall_time: float
    failed: bool = False
    reason: str | None = None

    @property
    def n_subqueries(self) -> int:
        return len(self.trajectory.steps)

    @property
    def n_retrievals(self) -> int:
        return self.trajectory.retrieval_count

    @property
    def correct(self) -> bool:
        return bool(self.trajectory.correct)

    def to_json(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "final_answer": self.final_answer,
            "trajectory": self.trajectory.to_json(),
            "n_subqueries": self.n_subqueries,
            "n_retrievals": self.n_retrievals,
            "model_calls": self.model_calls,
            "wall_time": self.wall_time,
            "failed": self.failed,
            "reason": self.reason,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any], question: QAInstance | None = None) -> InferenceResult:
        traj = Trajectory.from_json(obj["trajectory"], question=question)
        return cls(obj["question_id"], obj["final_answer"], traj, obj["model_calls"], obj["wall_time"], obj["failed"], obj["reason"])


class _Failed(Exception):
    pass


class _Run:
    def __init__(self, question, gateway, index, mode, budget, k, role, instruction, max_doc_chars, seed):
        self.question = question
        self.gateway = gateway
        self.index = index
        self.mode = mode
        self.budget = budget
        self.k = k
        self.role = role
        self.instruction = instruction
        self.max_doc_chars = max_doc_chars
        self.seed = seed
        self.calls = 0
        self.state = State(question, (), budget.max_depth)

    def _call(self, request) -> str:
        if self.calls >= self.budget.max_model_calls:
            raise _Failed(f"model call budget {self.budget.max_model_calls} exhausted")
        self.calls += 1
        return self.gateway.generate(self.role, request)

    def _with_retry(self, make_request, parse):
        """One retry with seed + 1 on a malformed emission, then give up."""
        seed = self.seed
        for attempt in range(2):
            emission = self._call(make_request(seed))
            try:
                return parse(emission)
            except MalformedTurn as exc:
                logger.info("malformed emission for %s (attempt %d): %s", self.question.id, attempt + 1, exc)
                seed = None if seed is None else seed + 1
        raise _Failed("malformed model output twice")

    def _prompt(self, state, forced=None):
        return render_prompt(self.instruction, state, forced, self.max_doc_chars)

    def _answer(self, state: State, forced) -> str:
        prompt = self._prompt(state, forced)
        return self._with_retry(lambda seed: answer_request(prompt, seed), parse_answer)

    def _final(self, state: State) -> str:
        return self._answer(state, FinalContinuation())

    def loop(self) -> tuple[State, str, bool]:
        state = self.state
        seen: set[str] = set()
        while True:
            if state.at_depth_limit:
                return state, self._final(state), True
            prompt = self._prompt(state)
            turn = self._with_retry(lambda seed: opening_request(prompt, seed), parse_turn)
            if isinstance(turn, Final):
                return state, turn.answer, False
            q = turn.subquery
            norm = normalize_answer(q)
            if norm in seen:
                logger.info("repeated subquery %r on %s; forcing final answer", q, self.question.id)
                return state, self._final(state), False
            seen.add(norm)

            decision = turn.decision
            if self.mode is InferenceMode.RETRIEVE_EVERY_STEP:
                retrieve = True
            elif self.mode is InferenceMode.PARAMETRIC_ONLY:
                retrieve = False
            else:
                retrieve = isinstance(decision, RetrieveMarker)

            if retrieve:
                docs = self.index.search(q, self.k)
                if docs:
                    answer = self._answer(state, RetrievedContinuation(q, tuple(docs)))
                    state = self.state = append_step(state, q, Retrieved(tuple(docs), answer))
                    continue
                logger.info("no documents for %r; answering from memory", q)
            if isinstance(decision, ParametricAnswer):
                answer = decision.answer
            else:
                answer = self._answer(state, ParametricContinuation(q))
            state = self.state = append_step(state, q, Parametric(answer))


def run(
    question: QAInstance,
    gateway: ModelGateway,
    index,
    mode: InferenceMode = InferenceMode.ADAPTIVE,
    budget: SearchBudget = SearchBudget(),
    k: int = 3,
    role: str = "target",
    instruction: str = DEFAULT_INSTRUCTION,
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS,
    seed: int | None = 0,
) -> InferenceResult:
    """Answer one question. Never raises for model misbehaviour: failures come
    back as a result with ``failed=True`` and an empty answer."""
    r = _Run(question, gateway, index, mode, budget, k, role, instruction, max_doc_chars, seed)
    start = time.perf_counter()
    try:
        state, answer, forced = r.loop()
    except (_Failed, BudgetExceeded, EndpointUnreachable, ScriptMiss) as exc:
        logger.warning("question %s failed: %s", question.id, exc)
        traj = Trajectory(r.state, "", False)
        return InferenceResult(question.id, "", traj, r.calls, time.perf_counter() - start, True, str(exc))
    traj = Trajectory(state, answer, exact_match(answer, question.gold_answers), forced)
    return InferenceResult(question.id, answer, traj, r.calls, time.perf_counter() - start)


def run_batch(questions: Sequence[QAInstance], gateway: ModelGateway, index, jobs: int = 1, **kw: Any) -> list[InferenceResult]:
    """Run many questions on a worker pool; results keep input order."""
    if jobs <= 1:
        return [run(q, gateway, index, **kw) for q in questions]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda q: run(q, gateway, index, **kw), questions))
