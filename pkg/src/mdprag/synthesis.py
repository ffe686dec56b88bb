"""Training-data products.

Stage I: prompt/completion pairs in the answer format, with character spans
marking retrieved document text so a trainer can exclude it from the loss.

Stage II: per-subquery preference pairs over the decision head that follows
``Follow up: <q>``; the direct-answer head ``Intermediate answer:`` is
preferred where the optimal path answered from memory, the retrieval marker
where it retrieved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from .core import QAInstance, Reward, State, Trajectory
from .gateway import (
    DEFAULT_INSTRUCTION,
    DEFAULT_MAX_DOC_CHARS,
    FINAL,
    FOLLOW_UP,
    INTERMEDIATE,
    RETRIEVE,
    render_prompt,
    render_steps,
)


class RejectedTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class ImitationExample:
    prompt: str
    completion: str
    mask_spans: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        end = 0
        for start, stop in self.mask_spans:
            if not end <= start <= stop <= len(self.completion):
                raise ValueError(f"mask span {(start, stop)} out of order or out of bounds")
            end = stop

    def masked_text(self) -> str:
        return "".join(self.completion[a:b] for a, b in self.mask_spans)

    def unmasked_text(self) -> str:
        out, pos = [], 0
        for a, b in self.mask_spans:
            out.append(self.completion[pos:a])
            pos = b
        out.append(self.completion[pos:])
        return "".join(out)

    def to_json(self) -> dict[str, Any]:
        return {"prompt": self.prompt, "completion": self.completion, "mask_spans": [list(s) for s in self.mask_spans]}


@dataclass(frozen=True)
class PreferencePair:
    context: str
    chosen: str
    rejected: str

    def to_json(self) -> dict[str, str]:
        return {"context": self.context, "chosen": self.chosen, "rejected": self.rejected}


def _question_prompt(instruction: str, state: State, max_doc_chars: int) -> str:
    return render_prompt(instruction, State(state.question, (), state.max_depth), None, max_doc_chars).text()


def render_completion(traj: Trajectory, max_doc_chars: int = DEFAULT_MAX_DOC_CHARS) -> tuple[str, list[tuple[int, int]]]:
    text, spans = render_steps(traj.steps, max_doc_chars)
    if text:
        text += "\n"
    return text + f"{FINAL} {traj.final_answer}", spans


def to_imitation_example(
    traj: Trajectory, instruction: str = DEFAULT_INSTRUCTION, max_doc_chars: int = DEFAULT_MAX_DOC_CHARS
) -> ImitationExample:
    if traj.correct is not True:
        raise RejectedTrajectory(f"trajectory for {traj.state.question.id} is not judged correct")
    completion, spans = render_completion(traj, max_doc_chars)
    return ImitationExample(_question_prompt(instruction, traj.state, max_doc_chars), completion, tuple(spans))


def _decision_context(instruction: str, state: State, subquery: str, max_doc_chars: int) -> str:
    return render_prompt(instruction, state, None, max_doc_chars).text() + f"\n{FOLLOW_UP} {subquery}"


def _heads(retrieve: bool) -> tuple[str, str]:
    return (RETRIEVE, INTERMEDIATE) if retrieve else (INTERMEDIATE, RETRIEVE)


def build_preference_pairs(
    question: QAInstance,
    optimal: Trajectory,
    instruction: str = DEFAULT_INSTRUCTION,
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS,
) -> list[PreferencePair]:
    if optimal.state.question.id != question.id:
        raise ValueError(f"trajectory belongs to {optimal.state.question.id}, not {question.id}")
    pairs = []
    for i, step in enumerate(optimal.steps):
        prefix = State(question, optimal.steps[:i], optimal.state.max_depth)
        chosen, rejected = _heads(step.retrieved)
        pairs.append(PreferencePair(_decision_context(instruction, prefix, step.subquery, max_doc_chars), chosen, rejected))
    return pairs


def all_node_pairs(
    candidates: Sequence[Trajectory],
    instruction: str = DEFAULT_INSTRUCTION,
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS,
) -> list[PreferencePair]:
    """Ablation: a pair at every tree node where the best reward reachable
    through the retrieval branch differs from the parametric branch."""
    best: dict[tuple, dict[bool, Reward]] = {}
    where: dict[tuple, tuple[State, str]] = {}
    order: list[tuple] = []
    for traj in candidates:
        reward = Reward.of_correct(traj.retrieval_count) if traj.correct else Reward.incorrect()
        for i, step in enumerate(traj.steps):
            prefix = State(traj.state.question, traj.steps[:i], traj.state.max_depth)
            node = (prefix.key(), step.subquery)
            if node not in best:
                best[node] = {}
                where[node] = (prefix, step.subquery)
                order.append(node)
            branch = best[node]
            if step.retrieved not in branch or reward > branch[step.retrieved]:
                branch[step.retrieved] = reward
    pairs = []
    for node in order:
        branch = best[node]
        if len(branch) < 2 or branch[True] == branch[False]:
            continue
        chosen, rejected = _heads(branch[True] > branch[False])
        prefix, q = where[node]
        pairs.append(PreferencePair(_decision_context(instruction, prefix, q, max_doc_chars), chosen, rejected))
    return pairs


def sentence_wise_pairs(
    candidates: Sequence[Trajectory],
    instruction: str = DEFAULT_INSTRUCTION,
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS,
) -> list[PreferencePair]:
    """Ablation: whole-completion pairs between correct trajectories, the one
    with fewer retrievals preferred."""
    correct = [t for t in candidates if t.correct]
    pairs = []
    for a in correct:
        for b in correct:
            if a.retrieval_count < b.retrieval_count:
                pairs.append(
                    PreferencePair(
                        _question_prompt(instruction, a.state, max_doc_chars),
                        render_completion(a, max_doc_chars)[0],
                        render_completion(b, max_doc_chars)[0],
                    )
                )
    return pairs
