"""Okapi BM25 over a TSV passage corpus.

Title and body share one field: the document token stream is the title
tokens, one separator slot, then the body tokens. The separator counts
toward document length but can never match a query term, so it is not
stored in the postings.

Snapshot layout is documented in ``docs/index_format.md``.
"""

from __future__ import annotations

import heapq
import io
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .core import Document

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    "a an and are as at be but by for from has have he her his in is it its of on or "
    "she that the their they this to was were which who will with".split()
)


class DuplicateDocId(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


class UnknownDocId(KeyError):
    pass


class MalformedCorpusLine(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class SnapshotError(ValueError):
    pass


def tokenize(text: str, remove_stopwords: bool = False) -> list[str]:
    """Lowercase, split on every non-alphanumeric codepoint."""
    tokens = _TOKEN_RE.findall(text.lower())
    if remove_stopwords:
        tokens = [t for t in tokens if t not in STOPWORDS]
    return tokens


@dataclass(frozen=True)
class CorpusRecord:
    doc_id: str
    body: str
    title: str

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")


def read_corpus(path: str | Path, strict: bool = True) -> Iterator[CorpusRecord]:
    """Yield records from an ``id<TAB>text<TAB>title`` file.

    A first line starting with ``id`` is treated as a header. In strict mode
    a malformed line raises :class:`MalformedCorpusLine`; otherwise it is
    logged and skipped.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if line_no == 1 and line.startswith("id"):
                continue
            if not line.strip():
                continue
            cols = line.split("\t")
            reason = None
            if len(cols) != 3:
                reason = f"expected 3 tab-separated columns, got {len(cols)}"
            elif not cols[0].strip():
                reason = "empty id"
            if reason is not None:
                if strict:
                    raise MalformedCorpusLine(line_no, reason)
                logger.warning("skipping %s line %d: %s", path, line_no, reason)
                continue
            yield CorpusRecord(cols[0].strip(), cols[1], cols[2])


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75
    remove_stopwords: bool = False


@dataclass
class SearchIndex:
    params: BM25Params
    doc_ids: list[str]
    titles: list[str]
    bodies: list[str]
    doc_lengths: list[int]
    # term -> [(doc position, term frequency)] in ascending doc position
    postings: dict[str, list[tuple[int, int]]]
    _pos: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._pos = {d: i for i, d in enumerate(self.doc_ids)}
        self.avg_doc_length = sum(self.doc_lengths) / len(self.doc_lengths)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def doc_length(self, doc_id: str) -> int:
        return self.doc_lengths[self._position(doc_id)]

    def document(self, doc_id: str, score: float = 0.0) -> Document:
        i = self._position(doc_id)
        return Document(doc_id, self.titles[i], self.bodies[i], score)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def query_terms(self, query: str) -> list[str]:
        return sorted(set(tokenize(query, self.params.remove_stopwords)))

    def _position(self, doc_id: str) -> int:
        try:
            return self._pos[doc_id]
        except KeyError:
            raise UnknownDocId(doc_id) from None

    def _term_weight(self, tf: int, length: int) -> float:
        k1, b = self.params.k1, self.params.b
        return tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / self.avg_doc_length))

    def score(self, query: str, doc_id: str) -> float:
        i = self._position(doc_id)
        total = 0.0
        for term in self.query_terms(query):
            for pos, tf in self.postings.get(term, ()):
                if pos == i:
                    total += self.idf(term) * self._term_weight(tf, self.doc_lengths[i])
                    break
        return total

    def search(self, query: str, k: int) -> list[Document]:
        if k < 1:
            raise ValueError("k must be positive")
        scores: dict[int, float] = {}
        # terms are visited in sorted order so sums match score() bit for bit
        for term in self.query_terms(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for pos, tf in plist:
                scores[pos] = scores.get(pos, 0.0) + idf * self._term_weight(tf, self.doc_lengths[pos])
        top = heapq.nsmallest(k, scores.items(), key=lambda kv: (-kv[1], self.doc_ids[kv[0]]))
        return [Document(self.doc_ids[p], self.titles[p], self.bodies[p], s) for p, s in top]

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))

        stats = io.BytesIO()
        stats.write(struct.pack("<ddBQ", self.params.k1, self.params.b, int(self.params.remove_stopwords), self.doc_count))
        docs = io.BytesIO()
        for doc_id, title, body, length in zip(self.doc_ids, self.titles, self.bodies, self.doc_lengths):
            _write_str(docs, doc_id)
            _write_str(docs, title)
            _write_str(docs, body)
            docs.write(struct.pack("<I", length))
        terms = sorted(self.postings)
        dictionary = io.BytesIO()
        dictionary.write(struct.pack("<Q", len(terms)))
        postings = io.BytesIO()
        for term in terms:
            plist = self.postings[term]
            _write_str(dictionary, term)
            dictionary.write(struct.pack("<QI", postings.tell(), len(plist)))
            for pos, tf in plist:
                postings.write(struct.pack("<II", pos, tf))

        for section in (stats, docs, dictionary, postings):
            data = section.getvalue()
            out.write(struct.pack("<Q", len(data)))
            out.write(data)
        return out.getvalue()

    @classmethod
    def load(cls, path: str | Path) -> SearchIndex:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> SearchIndex:
        try:
            return cls._decode(blob)
        except (struct.error, UnicodeDecodeError) as exc:
            raise SnapshotError(f"corrupt snapshot: {exc}") from exc

    @classmethod
    def _decode(cls, blob: bytes) -> SearchIndex:
        buf = io.BytesIO(blob)
        if buf.read(4) != MAGIC:
            raise SnapshotError("not an index snapshot (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(buf, 4))
        if version != FORMAT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        sections = []
        for _ in range(4):
            (size,) = struct.unpack("<Q", _read_exact(buf, 8))
            sections.append(io.BytesIO(_read_exact(buf, size)))
        stats, docs, dictionary, postings = sections

        k1, b, stop, n = struct.unpack("<ddBQ", _read_exact(stats, struct.calcsize("<ddBQ")))
        doc_ids, titles, bodies, lengths = [], [], [], []
        for _ in range(n):
            doc_ids.append(_read_str(docs))
            titles.append(_read_str(docs))
            bodies.append(_read_str(docs))
            lengths.append(struct.unpack("<I", _read_exact(docs, 4))[0])
        (n_terms,) = struct.unpack("<Q", _read_exact(dictionary, 8))
        raw = postings.getvalue()
        index: dict[str, list[tuple[int, int]]] = {}
        for _ in range(n_terms):
            term = _read_str(dictionary)
            offset, count = struct.unpack("<QI", _read_exact(dictionary, 12))
            flat = struct.unpack_from(f"<{2 * count}I", raw, offset)
            index[term] = list(zip(flat[0::2], flat[1::2]))
        return cls(BM25Params(k1, b, bool(stop)), doc_ids, titles, bodies, lengths, index)


MAGIC = b"BM25"
FORMAT_VERSION = 1


def _write_str(out: BinaryIO, s: str) -> None:
    data = s.encode("utf-8")
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def _read_exact(buf: BinaryIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise SnapshotError("truncated snapshot")
    return data


def _read_str(buf: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def build_index(records: Iterable[CorpusRecord], params: BM25Params | None = None) -> SearchIndex:
    params = params or BM25Params()
    doc_ids: list[str] = []
    titles: list[str] = []
    bodies: list[str] = []
    lengths: list[int] = []
    postings: dict[str, list[tuple[int, int]]] = {}
    seen: set[str] = set()
    for rec in records:
        if rec.doc_id in seen:
            raise DuplicateDocId(f"duplicate doc_id {rec.doc_id!r}")
        seen.add(rec.doc_id)
        pos = len(doc_ids)
        title_toks = tokenize(rec.title, params.remove_stopwords)
        body_toks = tokenize(rec.body, params.remove_stopwords)
        doc_ids.append(rec.doc_id)
        titles.append(rec.title)
        bodies.append(rec.body)
        lengths.append(len(title_toks) + 1 + len(body_toks))
        for term, tf in Counter(title_toks + body_toks).items():
            postings.setdefault(term, []).append((pos, tf))
    if not doc_ids:
        raise EmptyCorpus("corpus yielded no records")
    return SearchIndex(params, doc_ids, titles, bodies, lengths, postings)


class CountingIndex:
    """Wraps an index and counts ``search`` calls; used to prove a code path
    never touches retrieval."""

    def __init__(self, index: SearchIndex):
        self.index = index
        self.searches = 0

    def search(self, query: str, k: int) -> list[Document]:
        self.searches += 1
        return self.index.search(query, k)

    def __getattr__(self, name: str):
        return getattr(self.index, name)
