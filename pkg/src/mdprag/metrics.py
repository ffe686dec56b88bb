"""Answer scoring, retrieval efficiency, knowledge-boundary calibration and
decomposition statistics."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from .inference import InferenceResult


class EmptyInput(ValueError):
    pass


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """SQuAD-style normalisation: lowercase, drop punctuation and articles,
    collapse whitespace."""
    text = text.lower().translate(_PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, golds: Sequence[str]) -> bool:
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(pred)
    return any(p == normalize_answer(g) for g in golds)


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(pred).split()
    return max(_f1(p, normalize_answer(g).split()) for g in golds)


# -- retrieval efficiency -------------------------------------------------------


@dataclass(frozen=True)
class RetrievalStats:
    em: float
    avg_retrievals_all: float
    avg_retrievals_correct: float | None
    avg_retrievals_incorrect: float | None
    avg_seconds_per_item: float


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def retrieval_stats(results: Sequence[tuple[InferenceResult, bool]]) -> RetrievalStats:
    if not results:
        raise EmptyInput("retrieval_stats needs at least one result")
    right = [r.n_retrievals for r, ok in results if ok]
    wrong = [r.n_retrievals for r, ok in results if not ok]
    return RetrievalStats(
        em=len(right) / len(results),
        avg_retrievals_all=sum(r.n_retrievals for r, _ in results) / len(results),
        avg_retrievals_correct=_mean(right),
        avg_retrievals_incorrect=_mean(wrong),
        avg_seconds_per_item=sum(r.wall_time for r, _ in results) / len(results),
    )


# -- knowledge boundary ---------------------------------------------------------


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class BoundaryStats:
    f1: float
    accuracy: float
    balanced_accuracy: float
    mcc: float
    confusion: Confusion


@dataclass(frozen=True)
class BoundaryRecord:
    # positive class: the question needs retrieval
    needs_retrieval: bool
    did_retrieve: bool


def confusion_of(records: Iterable[BoundaryRecord]) -> Confusion:
    tp = fp = tn = fn = 0
    for r in records:
        if r.needs_retrieval and r.did_retrieve:
            tp += 1
        elif r.did_retrieve:
            fp += 1
        elif r.needs_retrieval:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, tn, fn)


def boundary_from_confusion(c: Confusion) -> BoundaryStats:
    """Metrics from a confusion matrix. Undefined rates count as 0.5 in
    balanced accuracy; MCC is 0 when any marginal is empty."""
    if c.total == 0:
        raise EmptyInput("empty confusion matrix")
    denom_f1 = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / denom_f1 if denom_f1 else 0.0
    accuracy = (c.tp + c.tn) / c.total
    tpr = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.5
    tnr = c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.5
    margins = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(margins) if margins else 0.0
    return BoundaryStats(f1, accuracy, (tpr + tnr) / 2, mcc, c)


def boundary_metrics(records: Sequence[BoundaryRecord]) -> BoundaryStats:
    if not records:
        raise EmptyInput("boundary_metrics needs at least one record")
    return boundary_from_confusion(confusion_of(records))


# -- decomposition ------------------------------------------------------------

WH_WORDS = frozenset({"who", "what", "when", "where", "which", "why", "whose", "whom", "how"})
CONJUNCTIONS = frozenset({"and", "or"})

# "0" holds questions answered without any subquery, keeping totals equal to N
SUBQUERY_BUCKETS = ("0", "1", "2", "3", "4", "5", ">=6")
RETRIEVAL_BUCKETS = ("0", "1", "2", ">=3")


@dataclass
class DecompositionStats:
    subquery_histogram: dict[str, int] = field(default_factory=lambda: dict.fromkeys(SUBQUERY_BUCKETS, 0))
    retrieval_histogram: dict[str, int] = field(default_factory=lambda: dict.fromkeys(RETRIEVAL_BUCKETS, 0))
    avg_wh_words: float = 0.0
    avg_conjunctions: float = 0.0


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def count_words(text: str, vocabulary: frozenset[str]) -> int:
    return sum(1 for w in _words(text) if w in vocabulary)


def _bucket(n: int, cap: int) -> str:
    return f">={cap}" if n >= cap else str(n)


def decomposition_stats(results: Sequence[InferenceResult]) -> DecompositionStats:
    """Histograms of subquery and retrieval counts, plus per-subquery averages
    of WH-words and and/or conjunctions."""
    if not results:
        raise EmptyInput("decomposition_stats needs at least one result")
    stats = DecompositionStats()
    subqueries: list[str] = []
    for r in results:
        stats.subquery_histogram[_bucket(r.n_subqueries, 6)] += 1
        stats.retrieval_histogram[_bucket(r.n_retrievals, 3)] += 1
        subqueries.extend(s.subquery for s in r.trajectory.steps)
    if subqueries:
        stats.avg_wh_words = sum(count_words(q, WH_WORDS) for q in subqueries) / len(subqueries)
        stats.avg_conjunctions = sum(count_words(q, CONJUNCTIONS) for q in subqueries) / len(subqueries)
    return stats


def to_json(stats) -> dict:
    return asdict(stats)
