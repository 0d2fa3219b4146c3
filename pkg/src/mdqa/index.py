"""Tokenization, inverted-index construction, and BM25 candidate retrieval.

Scoring uses the non-negative idf variant ``ln(1 + (N - df + 0.5)/(df + 0.5))``
and treats the query as a set: repeated query terms do not change the score.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Passage
from .errors import CorpusFormatError, DuplicateIdError, UnknownPassageError

# Maximal runs of alphanumeric characters; underscore counts as a separator.
_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)

SNAPSHOT_MAGIC = "mdqa-bm25-index"
SNAPSHOT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every maximal run of non-alphanumeric characters.

    Digits are retained; no stemming, no stopword removal.
    """
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    """BM25 free parameters: k1 (tf saturation) and b (length normalization)."""

    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class SearchHit:
    passage_id: str
    score: float
    rank: int


@dataclass
class Index:
    """Immutable-after-build inverted index with corpus statistics.

    postings maps term -> [(passage_id, term_frequency)]; doc_lengths maps
    passage_id -> token count.
    """

    params: Bm25Params
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1 + (self.n_docs - df + 0.5) / (df + 0.5))


def build_index(passages: Iterable[Passage], params: Bm25Params | None = None) -> Index:
    """Build an inverted index over the given passages.

    Raises DuplicateIdError if two passages share an id.
    """
    index = Index(params=params or Bm25Params())
    for passage in passages:
        if passage.id in index.doc_lengths:
            raise DuplicateIdError(f"duplicate passage id {passage.id!r}")
        tokens = tokenize(passage.text)
        index.doc_lengths[passage.id] = len(tokens)
        for term, tf in Counter(tokens).items():
            index.postings.setdefault(term, []).append((passage.id, tf))
    return index


def _tf_part(tf: int, k1: float, b: float, dl: int, avgdl: float) -> float:
    norm = 1 - b + b * (dl / avgdl if avgdl > 0 else 0.0)
    return tf * (k1 + 1) / (tf + k1 * norm)


def bm25_score(index: Index, query_terms: Sequence[str], passage_id: str) -> float:
    """BM25 score of one passage for the unique terms of a query."""
    if passage_id not in index.doc_lengths:
        raise UnknownPassageError(f"passage id {passage_id!r} not in index")
    dl = index.doc_lengths[passage_id]
    avgdl = index.avgdl
    k1, b = index.params.k1, index.params.b
    score = 0.0
    for term in sorted(set(query_terms)):
        tf = 0
        for candidate_id, candidate_tf in index.postings.get(term, ()):
            if candidate_id == passage_id:
                tf = candidate_tf
                break
        if tf == 0:
            continue
        score += index.idf(term) * _tf_part(tf, k1, b, dl, avgdl)
    return score


def search(index: Index, query: str, k: int) -> list[SearchHit]:
    """Return the k highest-scoring passages with nonzero term overlap.

    Hits are ordered by non-increasing score, ties broken by ascending
    passage id; ranks are consecutive from 1.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = sorted(set(tokenize(query)))
    avgdl = index.avgdl
    k1, b = index.params.k1, index.params.b
    scores: dict[str, float] = {}
    for term in terms:
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = index.idf(term)
        for passage_id, tf in postings:
            part = idf * _tf_part(tf, k1, b, index.doc_lengths[passage_id], avgdl)
            scores[passage_id] = scores.get(passage_id, 0.0) + part
    ordered = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    return [
        SearchHit(passage_id=passage_id, score=score, rank=rank)
        for rank, (passage_id, score) in enumerate(ordered, start=1)
    ]


def save_index(index: Index, path: str | Path) -> None:
    """Write a line-based snapshot: a header line, a doc-lengths line, then
    one postings line per term."""
    with open(path, "w", encoding="utf-8") as handle:
        header = {
            "magic": SNAPSHOT_MAGIC,
            "version": SNAPSHOT_VERSION,
            "k1": index.params.k1,
            "b": index.params.b,
        }
        handle.write(json.dumps(header) + "\n")
        handle.write(json.dumps({"doc_lengths": index.doc_lengths}, ensure_ascii=False) + "\n")
        for term in sorted(index.postings):
            line = {"term": term, "postings": index.postings[term]}
            handle.write(json.dumps(line, ensure_ascii=False) + "\n")


def load_index(path: str | Path) -> Index:
    """Load a snapshot written by save_index, validating magic and version."""
    with open(path, encoding="utf-8") as handle:
        try:
            header = json.loads(handle.readline())
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"index snapshot header is not JSON ({exc.msg})") from exc
        if header.get("magic") != SNAPSHOT_MAGIC:
            raise CorpusFormatError("not an index snapshot (bad magic)")
        if header.get("version") != SNAPSHOT_VERSION:
            raise CorpusFormatError(
                f"unsupported snapshot version {header.get('version')!r}, "
                f"expected {SNAPSHOT_VERSION}"
            )
        index = Index(params=Bm25Params(k1=header["k1"], b=header["b"]))
        lengths_line = handle.readline()
        if not lengths_line:
            raise CorpusFormatError("index snapshot truncated: missing doc lengths")
        index.doc_lengths = {
            str(pid): int(length)
            for pid, length in json.loads(lengths_line)["doc_lengths"].items()
        }
        for line in handle:
            if not line.strip():
                continue
            record = json.loads(line)
            index.postings[record["term"]] = [
                (str(pid), int(tf)) for pid, tf in record["postings"]
            ]
    return index
