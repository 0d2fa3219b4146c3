"""Second retrieval stage: rerank BM25 candidates with a relevance scorer.

Two scorers implement the same interface: RemoteScorer speaks the
``POST /rescore`` wire protocol of a sequence-to-sequence relevance service
(scores are log-probabilities of a "true" token, hence <= 0), and
OverlapScorer is a deterministic offline stand-in used in tests and
``--mock-providers`` runs.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import httpx

from .corpus import Passage
from .errors import ProtocolError
from .httputil import RequestGate, post_json
from .index import tokenize

logger = logging.getLogger(__name__)

# Passage text is truncated at a character cap approximating the scorer's
# token window, so overlong inputs never reach the scoring service.
DEFAULT_TEXT_CAP = 2048
DEFAULT_BATCH_SIZE = 16

# Input template of the relevance scorer; a real scoring service is expected
# to consume text shaped exactly like this.
SCORER_INPUT_TEMPLATE = "Query: {question} Document: {title}. {text} Relevant:"


@dataclass(frozen=True)
class ScoredPassage:
    passage: Passage
    relevance: float
    rank: int


@dataclass(frozen=True)
class RerankRequest:
    """Wire-level rerank request: a query plus unique, non-empty candidates."""

    query: str
    candidates: list[tuple[str, str, str]]  # (id, text, title)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidates must be non-empty")
        ids = [candidate_id for candidate_id, _, _ in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique")


class RelevanceScorer(ABC):
    """Scores passages for relevance to a question; shareable across threads."""

    scorer_id: str = "abstract"

    @abstractmethod
    def score(self, question: str, passages: Sequence[Passage]) -> list[float]:
        """Return one relevance score per passage, in input order."""


def fallback_score(question: str, passage: Passage) -> float:
    """Unique-token overlap: |shared tokens| / |question tokens|, in [0, 1]."""
    question_tokens = set(tokenize(question))
    if not question_tokens:
        return 0.0
    passage_tokens = set(tokenize(passage.text))
    return len(question_tokens & passage_tokens) / len(question_tokens)


class OverlapScorer(RelevanceScorer):
    """Deterministic offline scorer backed by fallback_score."""

    scorer_id = "overlap-fallback"

    def score(self, question: str, passages: Sequence[Passage]) -> list[float]:
        return [fallback_score(question, passage) for passage in passages]


def _content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RemoteScorer(RelevanceScorer):
    """Client for the ``POST /rescore`` relevance-scoring protocol.

    Candidates are sent in batches of ``batch_size`` and results reassembled
    in input order. Scores are cached by (scorer id, question, passage id,
    passage content hash); cache writes are atomic under a lock.
    """

    def __init__(
        self,
        endpoint: str,
        batch_size: int = DEFAULT_BATCH_SIZE,
        text_cap: int = DEFAULT_TEXT_CAP,
        attempts: int = 3,
        backoff_s: float = 1.0,
        max_in_flight: int = 4,
        requests_per_minute: float | None = None,
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.endpoint = endpoint.rstrip("/")
        self.scorer_id = f"remote:{self.endpoint}"
        self.batch_size = batch_size
        self.text_cap = text_cap
        self.attempts = attempts
        self.backoff_s = backoff_s
        self._gate = RequestGate(max_in_flight, requests_per_minute)
        self._client = httpx.Client(timeout=timeout_s, transport=transport)
        self._cache: dict[tuple[str, str, str, str], float] = {}
        self._cache_lock = threading.Lock()

    def _truncate(self, passage: Passage) -> str:
        if len(passage.text) > self.text_cap:
            logger.warning(
                "truncating passage %s from %d to %d characters for scoring",
                passage.id,
                len(passage.text),
                self.text_cap,
            )
            return passage.text[: self.text_cap]
        return passage.text

    def score(self, question: str, passages: Sequence[Passage]) -> list[float]:
        results: list[float | None] = [None] * len(passages)
        to_fetch: list[int] = []
        keys: list[tuple[str, str, str, str]] = []
        for position, passage in enumerate(passages):
            key = (self.scorer_id, question, passage.id, _content_hash(passage.text))
            keys.append(key)
            with self._cache_lock:
                cached = self._cache.get(key)
            if cached is not None:
                results[position] = cached
            else:
                to_fetch.append(position)

        for start in range(0, len(to_fetch), self.batch_size):
            positions = to_fetch[start : start + self.batch_size]
            request = RerankRequest(
                query=question,
                candidates=[
                    (passages[p].id, self._truncate(passages[p]), passages[p].title)
                    for p in positions
                ],
            )
            scores = remote_score(self, request)
            with self._cache_lock:
                for position, score in zip(positions, scores):
                    self._cache[keys[position]] = score
            for position, score in zip(positions, scores):
                results[position] = score
        return [score for score in results if score is not None]

    def post_request(self, request: RerankRequest) -> dict:
        payload = {
            "query": request.query,
            "documents": [
                {"id": candidate_id, "title": title, "text": text}
                for candidate_id, text, title in request.candidates
            ],
        }
        return post_json(
            self._client,
            self.endpoint + "/rescore",
            payload,
            attempts=self.attempts,
            backoff_s=self.backoff_s,
            gate=self._gate,
        )

    def close(self) -> None:
        self._client.close()


def remote_score(client: RemoteScorer, request: RerankRequest) -> list[float]:
    """Send one rerank request and validate the response against the protocol.

    The response must carry exactly one finite log-probability (<= 0) per
    candidate, aligned with request order.
    """
    body = client.post_request(request)
    scores = body.get("scores")
    if not isinstance(scores, list):
        raise ProtocolError("rescore response missing 'scores' list")
    if len(scores) != len(request.candidates):
        raise ProtocolError(
            f"rescore response has {len(scores)} scores for "
            f"{len(request.candidates)} candidates"
        )
    validated = []
    for value in scores:
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ProtocolError(f"rescore response contains non-finite score {value!r}")
        if value > 0:
            raise ProtocolError(f"rescore score {value!r} is not a log-probability (> 0)")
        validated.append(float(value))
    return validated


def rerank(
    question: str,
    candidates: Sequence[Passage],
    scorer: RelevanceScorer,
    top_k: int,
) -> list[ScoredPassage]:
    """Score every candidate once and return the top_k by relevance.

    Output is ordered by non-increasing relevance, ties broken by ascending
    passage id, so the result is invariant under input permutation.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    scores = scorer.score(question, candidates)
    if len(scores) != len(candidates):
        raise ProtocolError(
            f"scorer returned {len(scores)} scores for {len(candidates)} candidates"
        )
    ordered = sorted(
        zip(candidates, scores), key=lambda pair: (-pair[1], pair[0].id)
    )[:top_k]
    return [
        ScoredPassage(passage=passage, relevance=score, rank=rank)
        for rank, (passage, score) in enumerate(ordered, start=1)
    ]
