"""Binary-tree trajectory search.

Every expanded node asks the decomposer for its next turn. A final-answer
turn (or reaching ``max_depth``) makes the node terminal and the answer is
judged against gold. Otherwise the node gets two children sharing the same
subquery: a parametric child answered by the target model at the parent's
retrieval cost, and a retrieved child answered by the decomposer over the
top-k documents at cost + 1.

``synthesize`` under :data:`MINIMAL` is best-first on (retrieval count,
insertion order) and returns the first correct trajectory it dequeues, which
is a cheapest correct one. ``enumerate_all`` expands the whole tree and is
the oracle for that claim. The ``Most`` and ``Random`` ablations expand the
whole tree too, then pick among the terminal trajectories.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

from .core import Parametric, QAInstance, Retrieved, State, Trajectory, append_step, retrieval_count
from .gateway import (
    DEFAULT_INSTRUCTION,
    DEFAULT_MAX_DOC_CHARS,
    Final,
    FinalContinuation,
    MalformedTurn,
    ModelGateway,
    ParametricContinuation,
    RetrievedContinuation,
    answer_request,
    opening_request,
    parse_answer,
    parse_turn,
    render_prompt,
)
from .metrics import exact_match

logger = logging.getLogger(__name__)


class BudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchBudget:
    max_depth: int = 8
    max_expansions: int = 64
    max_model_calls: int = 256

    def __post_init__(self) -> None:
        if min(self.max_depth, self.max_expansions, self.max_model_calls) < 1:
            raise ValueError("search budget values must be positive")


@dataclass(frozen=True)
class Minimal:
    name = "minimal"


@dataclass(frozen=True)
class Most:
    name = "most"


@dataclass(frozen=True)
class Random:
    seed: int = 0
    name = "random"


SelectionPolicy = Union[Minimal, Most, Random]
MINIMAL = Minimal()
MOST = Most()


def policy_from_name(name: str, seed: int = 0) -> SelectionPolicy:
    if name == "minimal":
        return MINIMAL
    if name == "most":
        return MOST
    if name == "random":
        return Random(seed)
    raise ValueError(f"unknown selection policy {name!r}")


@dataclass(frozen=True)
class SearchNode:
    state: State
    sequence_number: int

    @property
    def retrieval_count(self) -> int:
        return retrieval_count(self.state)


@dataclass
class SearchLog:
    question_id: str
    policy: str
    events: list[dict[str, Any]] = field(default_factory=list)
    outcome: str | None = None  # "found", "queue_empty" or "budget_exhausted"
    model_calls: int = 0

    def add(self, event: str, **data: Any) -> None:
        self.events.append({"event": event, **data})

    def dequeued_counts(self) -> list[int]:
        return [e["retrieval_count"] for e in self.events if e["event"] == "dequeue"]

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.question_id,
            "policy": self.policy,
            "outcome": self.outcome,
            "model_calls": self.model_calls,
            "events": self.events,
        }


Matcher = Callable[[str, Sequence[str]], bool]


class _Expander:
    """Generates children or a terminal trajectory for one node at a time."""

    def __init__(
        self,
        question: QAInstance,
        gateway: ModelGateway,
        index,
        budget: SearchBudget,
        k: int,
        instruction: str,
        decomposer: str,
        target: str,
        max_doc_chars: int,
        matcher: Matcher,
        seed: int | None,
        log: SearchLog,
    ):
        self.question = question
        self.gateway = gateway
        self.index = index
        self.budget = budget
        self.k = k
        self.instruction = instruction
        self.decomposer = decomposer
        self.target = target
        self.max_doc_chars = max_doc_chars
        self.matcher = matcher
        self.seed = seed
        self.log = log
        self.calls = 0
        self._memo: dict[tuple, Trajectory | list[State]] = {}

    def _generate(self, role: str, request) -> str:
        if self.calls >= self.budget.max_model_calls:
            raise BudgetExhausted(f"{self.budget.max_model_calls} model calls used on {self.question.id}")
        self.calls += 1
        self.log.model_calls = self.calls
        return self.gateway.generate(role, request)

    def _prompt(self, state: State, forced=None):
        return render_prompt(self.instruction, state, forced, self.max_doc_chars)

    def root(self) -> State:
        return State(self.question, (), self.budget.max_depth)

    def _terminal(self, state: State, answer: str | None, depth_forced: bool) -> Trajectory | None:
        if answer is None:
            emission = self._generate(self.decomposer, answer_request(self._prompt(state, FinalContinuation()), self.seed))
            try:
                answer = parse_answer(emission)
            except MalformedTurn:
                self.log.add("malformed", depth=len(state), stage="final")
                return None
        correct = self.matcher(answer, self.question.gold_answers)
        return Trajectory(state, answer, correct, depth_forced)

    def expand(self, state: State) -> Trajectory | list[State] | None:
        key = state.key()
        if key not in self._memo:
            self._memo[key] = self._expand(state)
        return self._memo[key]

    def _expand(self, state: State) -> Trajectory | list[State] | None:
        if state.at_depth_limit:
            return self._terminal(state, None, depth_forced=True)
        emission = self._generate(self.decomposer, opening_request(self._prompt(state), self.seed))
        try:
            turn = parse_turn(emission)
        except MalformedTurn:
            self.log.add("malformed", depth=len(state), stage="opening")
            return None
        if isinstance(turn, Final):
            return self._terminal(state, turn.answer, depth_forced=False)

        q = turn.subquery
        children: list[State] = []
        emission = self._generate(self.target, answer_request(self._prompt(state, ParametricContinuation(q)), self.seed))
        try:
            children.append(append_step(state, q, Parametric(parse_answer(emission))))
        except MalformedTurn:
            self.log.add("malformed", depth=len(state), stage="parametric")

        docs = self.index.search(q, self.k)
        if not docs:
            self.log.add("no_documents", depth=len(state), subquery=q)
            return children
        forced = RetrievedContinuation(q, tuple(docs))
        emission = self._generate(self.decomposer, answer_request(self._prompt(state, forced), self.seed))
        try:
            children.append(append_step(state, q, Retrieved(tuple(docs), parse_answer(emission))))
        except MalformedTurn:
            self.log.add("malformed", depth=len(state), stage="retrieved")
        return children


def _expander(question, gateway, index, budget, k, kw, log) -> _Expander:
    return _Expander(
        question,
        gateway,
        index,
        budget,
        k,
        kw.get("instruction", DEFAULT_INSTRUCTION),
        kw.get("decomposer", "decomposer"),
        kw.get("target", "target"),
        kw.get("max_doc_chars", DEFAULT_MAX_DOC_CHARS),
        kw.get("matcher", exact_match),
        kw.get("seed", 0),
        log,
    )


def _verdict(log: SearchLog, seq: int, traj: Trajectory) -> None:
    log.add(
        "verdict",
        seq=seq,
        depth=len(traj.steps),
        retrieval_count=traj.retrieval_count,
        correct=traj.correct,
        final_answer=traj.final_answer,
        depth_forced=traj.depth_forced,
    )


def _expand_all(ex: _Expander, budget: SearchBudget, log: SearchLog) -> list[Trajectory]:
    """Breadth-first over the whole tree, parametric child first."""
    frontier = [SearchNode(ex.root(), 0)]
    seq = 0
    expansions = 0
    out: list[Trajectory] = []
    while frontier:
        nxt: list[SearchNode] = []
        for node in frontier:
            expansions += 1
            if expansions > budget.max_expansions:
                raise BudgetExhausted(f"more than {budget.max_expansions} expansions on {ex.question.id}")
            log.add("expand", seq=node.sequence_number, depth=len(node.state), retrieval_count=node.retrieval_count)
            result = ex.expand(node.state)
            if isinstance(result, Trajectory):
                _verdict(log, node.sequence_number, result)
                out.append(result)
            elif result:
                for child in result:
                    seq += 1
                    nxt.append(SearchNode(child, seq))
        frontier = nxt
    return out


def enumerate_all(
    question: QAInstance,
    gateway: ModelGateway,
    index,
    budget: SearchBudget,
    k: int,
    log: SearchLog | None = None,
    **kw: Any,
) -> list[Trajectory]:
    """Every terminal trajectory over all retrieve/parametric decision vectors,
    each judged. Raises :class:`BudgetExhausted` if the tree is too large."""
    log = log if log is not None else SearchLog(question.id, "enumerate")
    ex = _expander(question, gateway, index, budget, k, kw, log)
    return _expand_all(ex, budget, log)


def synthesize(
    question: QAInstance,
    gateway: ModelGateway,
    index,
    budget: SearchBudget,
    k: int,
    policy: SelectionPolicy = MINIMAL,
    log: SearchLog | None = None,
    **kw: Any,
) -> Trajectory | None:
    """Search for a correct trajectory; ``None`` when there is none within budget.

    Keyword options: ``instruction``, ``decomposer``/``target`` role names,
    ``max_doc_chars``, ``matcher`` and the generation ``seed``.
    """
    log = log if log is not None else SearchLog(question.id, policy.name)
    ex = _expander(question, gateway, index, budget, k, kw, log)
    try:
        if isinstance(policy, Minimal):
            found = _best_first(ex, budget, log)
        else:
            found = _select(_expand_all(ex, budget, log), policy, log)
    except BudgetExhausted as exc:
        logger.info("search budget exhausted: %s", exc)
        log.outcome = "budget_exhausted"
        return None
    log.outcome = "found" if found is not None else "queue_empty"
    return found


def _best_first(ex: _Expander, budget: SearchBudget, log: SearchLog) -> Trajectory | None:
    root = SearchNode(ex.root(), 0)
    queue: list[tuple[int, int, SearchNode]] = [(0, 0, root)]
    seq = 0
    expansions = 0
    while queue:
        cost, _, node = heapq.heappop(queue)
        expansions += 1
        if expansions > budget.max_expansions:
            raise BudgetExhausted(f"more than {budget.max_expansions} expansions on {ex.question.id}")
        log.add("dequeue", seq=node.sequence_number, depth=len(node.state), retrieval_count=cost)
        result = ex.expand(node.state)
        if isinstance(result, Trajectory):
            _verdict(log, node.sequence_number, result)
            if result.correct:
                return result
        elif result:
            for child in result:
                seq += 1
                heapq.heappush(queue, (retrieval_count(child), seq, SearchNode(child, seq)))
    return None


def _select(candidates: list[Trajectory], policy: SelectionPolicy, log: SearchLog) -> Trajectory | None:
    """Pick a correct terminal trajectory: highest retrieval count first
    (``Most``) or uniformly at random (``Random``)."""
    pool = list(enumerate(candidates))
    if isinstance(policy, Most):
        pool.sort(key=lambda it: (-it[1].retrieval_count, it[0]))
        order = pool
    else:
        rng = random.Random(policy.seed)
        order = []
        while pool:
            order.append(pool.pop(rng.randrange(len(pool))))
    for seq, traj in order:
        log.add("dequeue", seq=seq, depth=len(traj.steps), retrieval_count=traj.retrieval_count)
        if traj.correct:
            return traj
    return None
