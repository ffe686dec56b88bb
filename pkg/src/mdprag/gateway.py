"""Answer-format protocol and model invocation.

A transcript looks like::

    Question: <question>
    Follow up: <subquery>
    Let's search the question in Wikipedia.
    Context: <body 1>\t<body 2>
    Intermediate answer: <answer>
    Follow up: <subquery>
    Intermediate answer: <answer>
    So the final answer is: <answer>

Markers are line-anchored and case-sensitive; whitespace around a line is
ignored. Retrieved bodies are flattened to one line and joined with a tab,
which cannot occur inside a TSV corpus field.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence, Union

import httpx

from .core import Document, Retrieved, State, Step

logger = logging.getLogger(__name__)

QUESTION = "Question:"
FOLLOW_UP = "Follow up:"
RETRIEVE = "Let's search the question in Wikipedia."
CONTEXT = "Context:"
INTERMEDIATE = "Intermediate answer:"
FINAL = "So the final answer is:"

MARKERS = (FOLLOW_UP, RETRIEVE, CONTEXT, INTERMEDIATE, FINAL)
DOC_SEPARATOR = "\t"
DEFAULT_MAX_DOC_CHARS = 1500

DEFAULT_INSTRUCTION = (
    "Instruction: You are a helpful Retrieval-Augmented Generation (RAG) model. Your task is to "
    "answer questions by logically decomposing them into clear sub-questions and iteratively "
    "addressing each one.\n"
    'Use "Follow up:" to introduce each sub-question and "Intermediate answer:" to provide answers.\n'
    "For each sub-question, decide whether you can provide a direct answer or if additional "
    'information is required. If additional information is needed, state, "Let\'s search the '
    'question in Wikipedia." and then use the retrieved information to respond comprehensively. '
    "If a direct answer is possible, provide it immediately without searching."
)


class MalformedTurn(ValueError):
    def __init__(self, snippet: str, reason: str = "no protocol marker found"):
        super().__init__(f"{reason}: {snippet[:80]!r}")
        self.snippet = snippet


class EndpointUnreachable(RuntimeError):
    pass


class BudgetExceeded(RuntimeError):
    pass


class ScriptMiss(KeyError):
    pass


# -- prompts ------------------------------------------------------------------


@dataclass(frozen=True)
class ParametricContinuation:
    subquery: str


@dataclass(frozen=True)
class RetrievedContinuation:
    subquery: str
    documents: tuple[Document, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "documents", tuple(self.documents))
        if not self.documents:
            raise ValueError("retrieved continuation needs documents")


@dataclass(frozen=True)
class FinalContinuation:
    pass


Forced = Union[ParametricContinuation, RetrievedContinuation, FinalContinuation]


@dataclass(frozen=True)
class Prompt:
    instruction: str
    transcript: str
    forced_prefix: str | None = None

    @property
    def key(self) -> str:
        """Stable hash of (transcript, forced_prefix); the scripted model's lookup key."""
        return prompt_hash(self.transcript, self.forced_prefix)

    def text(self) -> str:
        parts = [self.instruction, "", self.transcript]
        if self.forced_prefix:
            parts.append(self.forced_prefix)
        return "\n".join(parts)

    def messages(self) -> list[dict[str, str]]:
        """Chat form: instruction as system, question as user, and everything
        after the question as a partial assistant turn to be continued."""
        question, _, rest = self.transcript.partition("\n")
        tail = "\n".join(p for p in (rest, self.forced_prefix) if p)
        msgs = [{"role": "system", "content": self.instruction}, {"role": "user", "content": question}]
        if tail:
            msgs.append({"role": "assistant", "content": tail})
        return msgs


def prompt_hash(transcript: str, forced_prefix: str | None) -> str:
    payload = json.dumps([transcript, forced_prefix or ""], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# everything str.splitlines() breaks on, plus the document separator
_LINE_BREAKS = re.compile(r"[\t\n\r\v\f\x1c\x1d\x1e\x85\u2028\u2029]")


def _one_line(text: str) -> str:
    return _LINE_BREAKS.sub(" ", text)


def render_context(documents: Sequence[Document], max_doc_chars: int = DEFAULT_MAX_DOC_CHARS) -> str:
    return DOC_SEPARATOR.join(_one_line(d.body[:max_doc_chars]) for d in documents)


def render_steps(
    steps: Sequence[Step], max_doc_chars: int = DEFAULT_MAX_DOC_CHARS
) -> tuple[str, list[tuple[int, int]]]:
    """Serialise steps; also return the character spans of each Context text."""
    out = ""
    spans: list[tuple[int, int]] = []
    for step in steps:
        if out:
            out += "\n"
        out += f"{FOLLOW_UP} {step.subquery}\n"
        if isinstance(step.response, Retrieved):
            out += f"{RETRIEVE}\n{CONTEXT} "
            start = len(out)
            out += render_context(step.response.documents, max_doc_chars)
            spans.append((start, len(out)))
            out += "\n"
        out += f"{INTERMEDIATE} {step.response.answer}"
    return out, spans


def render_prompt(
    instruction: str,
    state: State,
    forced: Forced | None = None,
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS,
) -> Prompt:
    steps_text, _ = render_steps(state.steps, max_doc_chars)
    transcript = f"{QUESTION} {_one_line(state.question.question)}"
    if steps_text:
        transcript += "\n" + steps_text
    prefix = None
    if isinstance(forced, ParametricContinuation):
        prefix = f"{FOLLOW_UP} {forced.subquery}\n{INTERMEDIATE}"
    elif isinstance(forced, RetrievedContinuation):
        ctx = render_context(forced.documents, max_doc_chars)
        prefix = f"{FOLLOW_UP} {forced.subquery}\n{RETRIEVE}\n{CONTEXT} {ctx}\n{INTERMEDIATE}"
    elif isinstance(forced, FinalContinuation):
        prefix = FINAL
    return Prompt(instruction, transcript, prefix)


# -- parsing ------------------------------------------------------------------


@dataclass(frozen=True)
class RetrieveMarker:
    pass


@dataclass(frozen=True)
class ParametricAnswer:
    answer: str


@dataclass(frozen=True)
class Undecided:
    pass


Decision = Union[RetrieveMarker, ParametricAnswer, Undecided]


@dataclass(frozen=True)
class FollowUp:
    subquery: str
    decision: Decision


@dataclass(frozen=True)
class Final:
    answer: str


ParsedTurn = Union[FollowUp, Final]

OPENING = "opening"
ANSWER = "answer"


def parse_answer(emission: str) -> str:
    """Answer text of a continuation emitted after a forced answer prefix."""
    return parse_turn(emission, ANSWER)  # type: ignore[return-value]


def _marker_of(line: str) -> str | None:
    s = line.strip()
    if s == RETRIEVE:
        return RETRIEVE
    for m in (FOLLOW_UP, CONTEXT, INTERMEDIATE, FINAL):
        if s.startswith(m):
            return m
    return None


def _after(line: str, marker: str) -> str:
    return line.strip()[len(marker):].strip()


def _gather(lines: list[str], start: int, head: str) -> str:
    """``head`` plus following lines up to the next marker line."""
    parts = [head]
    for line in lines[start:]:
        if _marker_of(line) is not None:
            break
        parts.append(line)
    return "\n".join(parts).strip()


def parse_turn(emission: str, expecting: str = OPENING) -> ParsedTurn | str:
    """Parse one model emission.

    In ``OPENING`` mode returns a :class:`Final` or :class:`FollowUp`. In
    ``ANSWER`` mode (the model continues after a forced ``Intermediate
    answer:`` or final-answer prefix) returns the answer text.
    """
    lines = emission.splitlines()
    if expecting == ANSWER:
        answer = _gather(lines, 1, lines[0]) if lines and _marker_of(lines[0]) is None else ""
        if not answer:
            raise MalformedTurn(emission, "empty answer continuation")
        return answer
    if expecting != OPENING:
        raise ValueError(f"unknown parse mode {expecting!r}")

    for i, line in enumerate(lines):
        if _marker_of(line) == FINAL:
            answer = _gather(lines, i + 1, _after(line, FINAL))
            if not answer:
                raise MalformedTurn(emission, "empty final answer")
            return Final(answer)
    for i, line in enumerate(lines):
        if _marker_of(line) != FOLLOW_UP:
            continue
        subquery = _after(line, FOLLOW_UP)
        if not subquery:
            raise MalformedTurn(emission, "empty subquery")
        for j in range(i + 1, len(lines)):
            m = _marker_of(lines[j])
            if m == RETRIEVE:
                return FollowUp(subquery, RetrieveMarker())
            if m == INTERMEDIATE:
                answer = _gather(lines, j + 1, _after(lines[j], INTERMEDIATE))
                return FollowUp(subquery, ParametricAnswer(answer) if answer else Undecided())
            if m is not None:
                break
        return FollowUp(subquery, Undecided())
    raise MalformedTurn(emission)


@dataclass(frozen=True)
class ParsedStep:
    subquery: str
    retrieved: bool
    context: str | None
    answer: str

    @property
    def bodies(self) -> list[str]:
        return self.context.split(DOC_SEPARATOR) if self.context is not None else []


@dataclass(frozen=True)
class ParsedTranscript:
    question: str | None
    steps: list[ParsedStep]
    final_answer: str | None


def parse_transcript(text: str) -> ParsedTranscript:
    """Parse a full rendered transcript or completion back into steps."""
    lines = text.splitlines()
    question = None
    steps: list[ParsedStep] = []
    final = None
    i = 0
    while i < len(lines):
        line = lines[i]
        s = line.strip()
        if s.startswith(QUESTION) and question is None and not steps:
            question = s[len(QUESTION):].strip()
            i += 1
            continue
        m = _marker_of(line)
        if m == FINAL:
            final = _gather(lines, i + 1, _after(line, FINAL))
            break
        if m != FOLLOW_UP:
            if s:
                raise MalformedTurn(line, "unexpected line in transcript")
            i += 1
            continue
        subquery = _after(line, FOLLOW_UP)
        i += 1
        retrieved, context = False, None
        if i < len(lines) and _marker_of(lines[i]) == RETRIEVE:
            retrieved = True
            i += 1
            if i >= len(lines) or _marker_of(lines[i]) != CONTEXT:
                raise MalformedTurn(text, "retrieval marker without Context line")
            # keep inner tabs; only the marker prefix and the line break are protocol
            raw = lines[i].lstrip()
            context = raw[len(CONTEXT) + 1:] if raw.startswith(CONTEXT + " ") else raw[len(CONTEXT):]
            i += 1
        if i >= len(lines) or _marker_of(lines[i]) != INTERMEDIATE:
            raise MalformedTurn(text, "follow-up without intermediate answer")
        j = i + 1
        while j < len(lines) and _marker_of(lines[j]) is None:
            j += 1
        answer = _gather(lines, i + 1, _after(lines[i], INTERMEDIATE))
        steps.append(ParsedStep(subquery, retrieved, context, answer))
        i = j
    return ParsedTranscript(question, steps, final)


# -- generation ---------------------------------------------------------------


@dataclass(frozen=True)
class GenerationRequest:
    prompt: Prompt
    stop_markers: tuple[str, ...] = MARKERS
    max_new_tokens: int = 256
    temperature: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_markers", tuple(self.stop_markers))
        bad = [m for m in self.stop_markers if m not in MARKERS]
        if bad:
            raise ValueError(f"stop markers must be protocol markers, got {bad}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


def truncate_at_stop(text: str, markers: Sequence[str]) -> str:
    """Cut ``text`` before the earliest marker that opens a later line.

    A marker at the very start of the emission is content, not a stop.
    """
    if not markers:
        return text
    pattern = re.compile(r"\n[ \t]*(?:" + "|".join(re.escape(m) for m in markers) + ")")
    m = pattern.search(text)
    return text[: m.start()] if m else text


class Model(Protocol):
    def complete(self, request: GenerationRequest) -> str: ...


class ScriptedModel:
    """Deterministic table-driven model keyed on the prompt hash."""

    def __init__(self, table: dict[str, str]):
        self.table = dict(table)

    @classmethod
    def from_entries(cls, entries: list[dict[str, Any]]) -> ScriptedModel:
        table = {}
        for entry in entries:
            match = entry["match"]
            if "transcript_hash" in match:
                key = match["transcript_hash"]
            else:
                key = prompt_hash(match["transcript"], match.get("forced_prefix"))
            table[key] = entry["emit"]
        return cls(table)

    @classmethod
    def load(cls, path: str | Path) -> ScriptedModel:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            import yaml

            entries = yaml.safe_load(text)
        else:
            entries = json.loads(text)
        return cls.from_entries(entries)

    def complete(self, request: GenerationRequest) -> str:
        try:
            return self.table[request.prompt.key]
        except KeyError:
            p = request.prompt
            raise ScriptMiss(f"no scripted emission for transcript {p.transcript[-120:]!r} / prefix {p.forced_prefix!r}") from None


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str | None = None
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0


class HttpModel:
    """Chat-completion client (``POST {base_url}/chat/completions``)."""

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            token = os.environ.get(self.config.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def payload(self, request: GenerationRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.config.model,
            "messages": request.prompt.messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
            "stop": ["\n" + m for m in request.stop_markers],
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def complete(self, request: GenerationRequest) -> str:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        body = self.payload(request)
        last: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                resp = self._client.post(url, json=body, headers=self._headers())
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500 and exc.response.status_code != 429:
                    raise
                last = exc
                logger.warning("endpoint %s attempt %d failed: %s", url, attempt + 1, exc)
                if attempt < self.config.retries:
                    time.sleep(self.config.backoff * 2**attempt)
        raise EndpointUnreachable(f"{url} unreachable after {self.config.retries + 1} attempts: {last}")


@dataclass
class ModelGateway:
    """Routes requests to named model roles ("decomposer", "target").

    ``max_calls`` caps total calls for the gateway's lifetime; ``concurrency``
    bounds in-flight requests across threads.
    """

    roles: dict[str, Model]
    max_calls: int | None = None
    concurrency: int = 8
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _slots: threading.BoundedSemaphore | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.concurrency)

    @classmethod
    def single(cls, model: Model, **kwargs) -> ModelGateway:
        return cls({"decomposer": model, "target": model}, **kwargs)

    def generate(self, role: str, request: GenerationRequest) -> str:
        model = self.roles[role]
        with self._lock:
            if self.max_calls is not None and self.calls >= self.max_calls:
                raise BudgetExceeded(f"model call cap {self.max_calls} reached")
            self.calls += 1
        with self._slots:
            raw = model.complete(request)
        return truncate_at_stop(raw, request.stop_markers)


# stop sets: an opening turn may carry one follow-up plus its decision line
OPENING_STOPS = (FOLLOW_UP, CONTEXT, FINAL)
ANSWER_STOPS = MARKERS


def opening_request(prompt: Prompt, seed: int | None = None, **kw) -> GenerationRequest:
    return GenerationRequest(prompt, OPENING_STOPS, seed=seed, **kw)


def answer_request(prompt: Prompt, seed: int | None = None, **kw) -> GenerationRequest:
    return GenerationRequest(prompt, ANSWER_STOPS, seed=seed, **kw)


def to_parsed_steps(steps: Sequence[Step], max_doc_chars: int = DEFAULT_MAX_DOC_CHARS) -> list[ParsedStep]:
    """What :func:`parse_transcript` should yield for ``steps``."""
    return [
        ParsedStep(
            s.subquery,
            isinstance(s.response, Retrieved),
            render_context(s.response.documents, max_doc_chars) if isinstance(s.response, Retrieved) else None,
            s.response.answer,
        )
        for s in steps
    ]

