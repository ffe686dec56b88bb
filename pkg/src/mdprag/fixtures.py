"""Scripted-model fixtures built from question plans.

A plan fixes, for every decomposition step, the subquery, the answer the
target model gives from memory, the answer the decomposer gives after
retrieval, and whether each is right. The builder walks every state the
tree search or the inference engine can reach, renders the exact prompts
they will send and records the emission for each, so a
:class:`~mdprag.gateway.ScriptedModel` over the table is fully hermetic.

Subquery templates may mention ``{prev}``, the previous step's answer as it
was actually given; a wrong answer therefore changes every later subquery,
and with it what retrieval returns.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .core import Parametric, QAInstance, Retrieved, State, append_step
from .gateway import (
    DEFAULT_INSTRUCTION,
    DEFAULT_MAX_DOC_CHARS,
    FINAL,
    FOLLOW_UP,
    INTERMEDIATE,
    RETRIEVE,
    FinalContinuation,
    ParametricContinuation,
    RetrievedContinuation,
    ScriptedModel,
    render_prompt,
)
from .retriever import BM25Params, CorpusRecord, SearchIndex, build_index

ADAPTIVE_CHOICES = ("parametric", "retrieve", "undecided")


@dataclass(frozen=True)
class StepPlan:
    subquery: str
    answer: str
    parametric_ok: bool
    retrieved_ok: bool
    # what an adaptive model emits after the follow-up line
    adaptive: str = "parametric"
    wrong: str | None = None

    def given(self, ok: bool) -> str:
        return self.answer if ok else (self.wrong or f"not {self.answer}")


@dataclass(frozen=True)
class QuestionPlan:
    question: QAInstance
    steps: tuple[StepPlan, ...]
    wrong_final: str = "unknown"

    def to_json(self) -> dict[str, Any]:
        return {
            "question": self.question.to_json(),
            "steps": [s.__dict__ for s in self.steps],
            "wrong_final": self.wrong_final,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> QuestionPlan:
        return cls(
            QAInstance.from_json(obj["question"]),
            tuple(StepPlan(**s) for s in obj["steps"]),
            obj.get("wrong_final", "unknown"),
        )

    def subquery(self, state: State) -> str:
        i = len(state.steps)
        prev = state.steps[-1].response.answer if state.steps else ""
        return self.steps[i].subquery.format(prev=prev)

    def on_track(self, state: State) -> bool:
        """Every answer so far is the right one."""
        return all(s.response.answer == p.answer for s, p in zip(state.steps, self.steps))

    def final_answer(self, state: State) -> str:
        done = len(state.steps) >= len(self.steps)
        return self.question.gold_answers[0] if done and self.on_track(state) else self.wrong_final


@dataclass
class ScriptBuilder:
    index: SearchIndex
    k: int = 3
    max_depth: int = 8
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS
    instruction: str = DEFAULT_INSTRUCTION
    table: dict[str, str] = field(default_factory=dict)

    def _put(self, state: State, forced, emission: str) -> None:
        prompt = render_prompt(self.instruction, state, forced, self.max_doc_chars)
        prev = self.table.setdefault(prompt.key, emission)
        if prev != emission:
            raise ValueError(f"conflicting scripted emissions for {prompt.transcript!r}")

    def add(self, plan: QuestionPlan) -> None:
        self._walk(plan, State(plan.question, (), self.max_depth))

    def _walk(self, plan: QuestionPlan, state: State) -> None:
        self._put(state, FinalContinuation(), " " + plan.final_answer(state))
        if state.at_depth_limit:
            return
        i = len(state.steps)
        if i >= len(plan.steps):
            self._put(state, None, f"{FINAL} {plan.final_answer(state)}")
            return
        step = plan.steps[i]
        q = plan.subquery(state)
        p_answer = step.given(step.parametric_ok)
        r_answer = step.given(step.retrieved_ok)

        opening = f"{FOLLOW_UP} {q}"
        if step.adaptive == "retrieve":
            opening += f"\n{RETRIEVE}"
        elif step.adaptive == "parametric":
            opening += f"\n{INTERMEDIATE} {p_answer}"
        self._put(state, None, opening)

        self._put(state, ParametricContinuation(q), " " + p_answer)
        self._walk(plan, append_step(state, q, Parametric(p_answer)))
        docs = self.index.search(q, self.k)
        if docs:
            self._put(state, RetrievedContinuation(q, tuple(docs)), " " + r_answer)
            self._walk(plan, append_step(state, q, Retrieved(tuple(docs), r_answer)))

    def model(self) -> ScriptedModel:
        return ScriptedModel(self.table)

    def entries(self) -> list[dict[str, Any]]:
        return [{"match": {"transcript_hash": h}, "emit": e} for h, e in sorted(self.table.items())]


def build_script(
    plans: Iterable[QuestionPlan], index: SearchIndex, k: int = 3, max_depth: int = 8, **kw: Any
) -> ScriptBuilder:
    builder = ScriptBuilder(index, k, max_depth, **kw)
    for plan in plans:
        builder.add(plan)
    return builder


# -- randomized fixtures ------------------------------------------------------

_RELATIONS = ("founder", "capital", "author", "director", "birthplace", "spouse", "mascot", "rival")


def random_world(rng: random.Random, n_entities: int = 40) -> list[CorpusRecord]:
    """A small corpus of relation facts over synthetic entity names."""
    records = []
    for e in range(n_entities):
        for rel in rng.sample(_RELATIONS, 3):
            target = rng.randrange(n_entities)
            records.append(
                # phrased unlike subqueries, so body text never shows up outside Context
                CorpusRecord(f"e{e}-{rel}", f"Records list entity{target} as the {rel} for entity{e}.", f"entity{e}")
            )
    return records


def random_plan(rng: random.Random, qid: str, max_steps: int = 4) -> QuestionPlan:
    n = rng.randint(1, max_steps)
    steps = []
    for i in range(n):
        rel = rng.choice(_RELATIONS)
        head = f"entity{rng.randrange(40)}" if i == 0 else "{prev}"
        steps.append(
            StepPlan(
                subquery=f"What is the {rel} of {head}?",
                answer=f"entity{rng.randrange(40)}",
                parametric_ok=rng.random() < 0.5,
                retrieved_ok=rng.random() < 0.75,
                adaptive=rng.choice(ADAPTIVE_CHOICES),
            )
        )
    gold = steps[-1].answer
    question = QAInstance(qid, f"Multi-hop question {qid} with {n} hops?", (gold,))
    return QuestionPlan(question, tuple(steps), wrong_final="no idea")


@dataclass
class Fixture:
    plan: QuestionPlan
    index: SearchIndex
    max_depth: int
    k: int
    model: ScriptedModel


def random_fixtures(seed: int, count: int, max_steps: int = 4, k: int = 2) -> list[Fixture]:
    rng = random.Random(seed)
    index = build_index(random_world(rng))
    out = []
    for i in range(count):
        plan = random_plan(rng, f"r{seed}-{i}", max_steps)
        depth = rng.randint(max(1, len(plan.steps) - 1), max_steps)
        builder = build_script([plan], index, k=k, max_depth=depth)
        out.append(Fixture(plan, index, depth, k, builder.model()))
    return out


# -- bundled demo fixture -----------------------------------------------------

DEMO_DIR = Path(__file__).parent / "data" / "demo"


def load_plans(path: str | Path) -> list[QuestionPlan]:
    with open(path, encoding="utf-8") as fh:
        return [QuestionPlan.from_json(json.loads(line)) for line in fh if line.strip()]


def write_demo(out_dir: str | Path, k: int = 3, max_depth: int = 8, params: BM25Params | None = None) -> dict[str, Path]:
    """Materialise the bundled fixture: corpus, questions, scripted model, config."""
    from .retriever import read_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = out / "corpus.tsv"
    corpus.write_text((DEMO_DIR / "corpus.tsv").read_text(encoding="utf-8"), encoding="utf-8")
    plans = load_plans(DEMO_DIR / "plans.jsonl")
    questions = out / "questions.jsonl"
    questions.write_text(
        "".join(json.dumps(p.question.to_json()) + "\n" for p in plans), encoding="utf-8"
    )
    index = build_index(read_corpus(corpus), params)
    script = out / "script.json"
    script.write_text(json.dumps(build_script(plans, index, k, max_depth).entries(), indent=1) + "\n", encoding="utf-8")
    config = out / "config.toml"
    config.write_text(
        "\n".join(
            [
                "[paths]",
                'corpus = "corpus.tsv"',
                'index = "index.bm25"',
                'dataset = "questions.jsonl"',
                'output = "out"',
                "",
                "[models.decomposer]",
                'scripted = "script.json"',
                "",
                "[models.target]",
                'scripted = "script.json"',
                "",
                "[search]",
                f"max_depth = {max_depth}",
                "max_expansions = 64",
                "max_model_calls = 256",
                f"k = {k}",
                "",
                "[seeds]",
                "generation = 0",
                "sample = 0",
                "",
            ]
        ),
        encoding="utf-8",
    )
    return {"corpus": corpus, "questions": questions, "script": script, "config": config}
