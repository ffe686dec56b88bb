import hashlib
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import DATA
from mdprag.retriever import (
    BM25Params,
    CorpusRecord,
    DuplicateDocId,
    EmptyCorpus,
    MalformedCorpusLine,
    SearchIndex,
    SnapshotError,
    UnknownDocId,
    build_index,
    read_corpus,
    tokenize,
)

CORPUS = DATA / "corpus100.tsv"
EXPECTED = json.loads((DATA / "bm25_expected.json").read_text())


@pytest.fixture(scope="module")
def rows():
    return [(r.doc_id, r.body, r.title) for r in read_corpus(CORPUS)]


@pytest.fixture(scope="module")
def index():
    return build_index(read_corpus(CORPUS))


def test_tokenize():
    assert tokenize("Hello, World! it's 2024_x") == ["hello", "world", "it", "s", "2024", "x"]
    assert tokenize("Café Zürich") == ["café", "zürich"]
    assert tokenize("--") == []
    assert tokenize("the river and a king", remove_stopwords=True) == ["river", "king"]


def test_three_records():
    idx = build_index([CorpusRecord(str(i), f"sentence {i}.", "t") for i in range(3)])
    assert idx.doc_count == 3


def test_duplicate_doc_id_named():
    recs = [CorpusRecord("a", "x", "t"), CorpusRecord("b", "y", "t"), CorpusRecord("a", "z", "t")]
    with pytest.raises(DuplicateDocId, match="'a'"):
        build_index(recs)


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        build_index([])


def test_statistics_match_counting_oracle(index, rows):
    st_ = oracles.corpus_stats(rows)
    assert index.doc_count == st_["n"] == EXPECTED["doc_count"]
    assert index.avg_doc_length == pytest.approx(st_["avg"], rel=1e-9)
    assert index.avg_doc_length == pytest.approx(EXPECTED["avg_doc_length"], rel=1e-9)
    for doc_id, length in st_["lengths"].items():
        assert index.doc_length(doc_id) == length
    assert {t: index.df(t) for t in st_["df"]} == st_["df"]
    for term, plist in index.postings.items():
        for pos, tf in plist:
            assert st_["tf"][index.doc_ids[pos]][term] == tf
    assert set(index.postings) == set(st_["df"])


def test_search_no_overlap_is_empty(index):
    assert index.search("zzzz qqqq", 5) == []


def test_single_document_first_word():
    idx = build_index([CorpusRecord("only", "Alpha beta gamma.", "Greek")])
    hits = idx.search("alpha", 3)
    assert [h.doc_id for h in hits] == ["only"]


def test_single_doc_closed_form():
    # len == avglen, tf = 1, k1 = 1.2, b = 0.75
    idx = build_index([CorpusRecord("d", "word", "")], BM25Params(1.2, 0.75))
    expected = math.log(1 + 0.5 / 1.5) * (1 * 2.2) / (1 + 1.2)
    assert expected == pytest.approx(0.28768207245178085, abs=1e-15)
    assert idx.score("word", "d") == pytest.approx(expected, rel=1e-12)


def test_score_term_absent_and_unknown(index):
    assert index.score("zzzz", "doc000") == 0.0
    with pytest.raises(UnknownDocId):
        index.score("river", "nope")


def test_top1_matches_frozen_oracle(index, rows):
    for case in EXPECTED["queries"]:
        hits = index.search(case["query"], 1)
        assert hits[0].doc_id == case["top1"], case["query"]
        assert hits[0].score == pytest.approx(case["top1_score"], rel=1e-9)


def test_search_is_prefix_of_bruteforce_ranking(index, rows):
    for case in EXPECTED["queries"]:
        ranking = oracles.bm25_ranking(rows, case["query"])
        hits = index.search(case["query"], 10)
        assert [h.doc_id for h in hits] == [d for d, _ in ranking[:10]]
        for h, (_, s) in zip(hits, ranking):
            assert h.score == pytest.approx(s, rel=1e-9)
            assert h.score == index.score(case["query"], h.doc_id)


def test_search_order_and_ties():
    idx = build_index([CorpusRecord(i, "same text", "") for i in ("b", "a", "c")])
    assert [d.doc_id for d in idx.search("same", 3)] == ["a", "b", "c"]
    assert len(idx.search("same", 2)) == 2
    with pytest.raises(ValueError):
        idx.search("same", 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(oracles.words(CORPUS.read_text())[:300]), min_size=1, max_size=5), st.integers(1, 8))
def test_scores_nonnegative_and_sorted(index, terms, k):
    query = " ".join(terms)
    hits = index.search(query, k)
    assert all(h.score > 0 for h in hits)
    keys = [(-h.score, h.doc_id) for h in hits]
    assert keys == sorted(keys)
    assert all(index.score(query, d) >= 0 for d in index.doc_ids[:10])


def test_snapshot_roundtrip_and_determinism(index, tmp_path):
    a, b = tmp_path / "a.bm25", tmp_path / "b.bm25"
    index.save(a)
    build_index(read_corpus(CORPUS)).save(b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    loaded = SearchIndex.load(a)
    assert loaded.doc_count == index.doc_count
    assert loaded.avg_doc_length == index.avg_doc_length
    for case in EXPECTED["queries"]:
        assert loaded.search(case["query"], 5) == index.search(case["query"], 5)


def test_snapshot_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(SnapshotError):
        SearchIndex.load(p)
    good = build_index([CorpusRecord("d", "x", "")]).to_bytes()
    with pytest.raises(SnapshotError):
        SearchIndex.from_bytes(good[:-3])


def test_read_corpus_strict_and_lenient(tmp_path, caplog):
    p = tmp_path / "c.tsv"
    p.write_text("id\ttext\ttitle\n1\tgood line\tT\n2\tmissing title\n3\tfine\tT\n", encoding="utf-8")
    with pytest.raises(MalformedCorpusLine) as exc:
        list(read_corpus(p))
    assert exc.value.line_no == 3
    recs = list(read_corpus(p, strict=False))
    assert [r.doc_id for r in recs] == ["1", "3"]
    assert "line 3" in caplog.text


def test_title_is_indexed():
    idx = build_index([CorpusRecord("d1", "a body", "Zanzibar"), CorpusRecord("d2", "other", "x")])
    assert [d.doc_id for d in idx.search("zanzibar", 5)] == ["d1"]
