"""Contracts and clients for the two external model services.

A completion service speaks ``POST /complete`` with body
``{"prompt", "max_tokens", "temperature", "stop"}`` and replies
``{"text": ...}``; an embedding service speaks ``POST /embed`` with
``{"texts": [...]}`` and replies ``{"vectors": [[...], ...]}``. API keys are
read from the MDQA_COMPLETION_API_KEY / MDQA_EMBEDDING_API_KEY environment
variables; endpoints come from configuration.

Deterministic mock clients back offline runs and the test suite.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .errors import BudgetError, ProtocolError
from .httputil import RequestGate, post_json

DEFAULT_MODEL_LIMIT = 4000

COMPLETION_KEY_ENV = "MDQA_COMPLETION_API_KEY"
EMBEDDING_KEY_ENV = "MDQA_EMBEDDING_API_KEY"


def estimate_tokens(text: str) -> int:
    """Conservative vendor-neutral token estimate: ceil(characters / 4)."""
    return -(-len(text) // 4)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if len(self.stop_sequences) > 4:
            raise ValueError("at most 4 stop sequences are allowed")

    def content_hash(self) -> str:
        payload = {
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "stop": list(self.stop_sequences),
        }
        canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite values")

    @property
    def dimension(self) -> int:
        return len(self.values)


class ResponseCache:
    """File-based request/response cache, one JSON file per request hash.

    Writes go through a temp file plus atomic replace, so concurrent writers
    of the same key degrade to last-writer-wins.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as handle:
                return json.load(handle)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None

    def put(self, key: str, request: dict, response: dict) -> None:
        record = {"request": request, "response": response}
        fd, tmp_name = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(record, handle, ensure_ascii=False)
            os.replace(tmp_name, self._path(key))
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise


def _cut_at_stop(text: str, stop_sequences: Sequence[str]) -> str:
    cut = len(text)
    for stop in stop_sequences:
        position = text.find(stop)
        if position != -1:
            cut = min(cut, position)
    return text[:cut]


class CompletionClient(ABC):
    """Text completion behind a neutral contract: budget check, cache, generate."""

    provider_id: str = "abstract-completion"

    def __init__(
        self,
        cache: ResponseCache | None = None,
        model_limit: int = DEFAULT_MODEL_LIMIT,
        count_tokens: Callable[[str], int] = estimate_tokens,
    ):
        self.cache = cache
        self.model_limit = model_limit
        self.count_tokens = count_tokens
        self.calls = 0  # network/generation calls, excludes cache hits

    def complete(self, request: CompletionRequest) -> str:
        prompt_tokens = self.count_tokens(request.prompt)
        if prompt_tokens + request.max_tokens > self.model_limit:
            raise BudgetError(
                f"estimated prompt tokens ({prompt_tokens}) plus max_tokens "
                f"({request.max_tokens}) exceed the model limit ({self.model_limit})"
            )
        key = request.content_hash()
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                return cached["response"]["text"]
        self.calls += 1
        text = _cut_at_stop(self._generate(request), request.stop_sequences)
        if self.cache is not None:
            self.cache.put(
                key,
                request={
                    "prompt": request.prompt,
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "stop": list(request.stop_sequences),
                },
                response={"text": text},
            )
        return text

    @abstractmethod
    def _generate(self, request: CompletionRequest) -> str:
        """Produce the raw completion text for a validated request."""


class HttpCompletionClient(CompletionClient):
    """Client for the ``POST /complete`` wire protocol."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        cache: ResponseCache | None = None,
        model_limit: int = DEFAULT_MODEL_LIMIT,
        count_tokens: Callable[[str], int] = estimate_tokens,
        attempts: int = 3,
        backoff_s: float = 1.0,
        max_in_flight: int = 4,
        requests_per_minute: float | None = None,
        timeout_s: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(cache=cache, model_limit=model_limit, count_tokens=count_tokens)
        self.endpoint = endpoint.rstrip("/")
        self.provider_id = f"completion:{self.endpoint}"
        self._api_key = api_key if api_key is not None else os.environ.get(COMPLETION_KEY_ENV)
        self._gate = RequestGate(max_in_flight, requests_per_minute)
        self._attempts = attempts
        self._backoff_s = backoff_s
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _headers(self) -> dict[str, str] | None:
        if self._api_key:
            return {"Authorization": f"Bearer {self._api_key}"}
        return None

    def _generate(self, request: CompletionRequest) -> str:
        body = post_json(
            self._client,
            self.endpoint + "/complete",
            {
                "prompt": request.prompt,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
                "stop": list(request.stop_sequences),
            },
            attempts=self._attempts,
            backoff_s=self._backoff_s,
            gate=self._gate,
            headers=self._headers(),
        )
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError("completion response missing 'text' string")
        return text

    def close(self) -> None:
        self._client.close()


class MockCompletionClient(CompletionClient):
    """Deterministic completion stand-in.

    Looks up the full prompt in ``canned`` first; otherwise applies ``rule``
    (a prompt -> text callable). With neither, raises KeyError.
    """

    provider_id = "mock-completion"

    def __init__(
        self,
        canned: dict[str, str] | None = None,
        rule: Callable[[str], str] | None = None,
        cache: ResponseCache | None = None,
        model_limit: int = DEFAULT_MODEL_LIMIT,
        count_tokens: Callable[[str], int] = estimate_tokens,
    ):
        super().__init__(cache=cache, model_limit=model_limit, count_tokens=count_tokens)
        self.canned = dict(canned or {})
        self.rule = rule

    def _generate(self, request: CompletionRequest) -> str:
        if request.prompt in self.canned:
            return self.canned[request.prompt]
        if self.rule is not None:
            return self.rule(request.prompt)
        raise KeyError("mock completion has no canned response for this prompt")


def complete(client: CompletionClient, request: CompletionRequest) -> str:
    """Run one completion through the client's budget check and cache."""
    return client.complete(request)


class EmbeddingClient(ABC):
    """Text embedding behind a neutral contract with per-text caching."""

    provider_id: str = "abstract-embedding"

    def __init__(self, cache: ResponseCache | None = None):
        self.cache = cache
        self.calls = 0

    def _text_key(self, text: str) -> str:
        material = json.dumps(
            {"kind": "embedding", "provider": self.provider_id, "text": text},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("texts must be non-empty")
        vectors: list[EmbeddingVector | None] = [None] * len(texts)
        missing: list[int] = []
        for position, text in enumerate(texts):
            if self.cache is not None:
                cached = self.cache.get(self._text_key(text))
                if cached is not None:
                    vectors[position] = EmbeddingVector(tuple(cached["response"]["vector"]))
                    continue
            missing.append(position)
        if missing:
            self.calls += 1
            raw = self._embed_batch([texts[p] for p in missing])
            if len(raw) != len(missing):
                raise ProtocolError(
                    f"embedding response has {len(raw)} vectors for {len(missing)} texts"
                )
            for position, values in zip(missing, raw):
                vectors[position] = EmbeddingVector(tuple(float(v) for v in values))
                if self.cache is not None:
                    self.cache.put(
                        self._text_key(texts[position]),
                        request={"text": texts[position]},
                        response={"vector": list(values)},
                    )
        result = [vector for vector in vectors if vector is not None]
        dimensions = {vector.dimension for vector in result}
        if len(dimensions) > 1:
            raise ProtocolError(f"embedding dimensions differ within a batch: {sorted(dimensions)}")
        return result

    @abstractmethod
    def _embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        """Embed the given texts, one vector per text, in order."""


class HttpEmbeddingClient(EmbeddingClient):
    """Client for the ``POST /embed`` wire protocol."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        cache: ResponseCache | None = None,
        attempts: int = 3,
        backoff_s: float = 1.0,
        max_in_flight: int = 4,
        requests_per_minute: float | None = None,
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(cache=cache)
        self.endpoint = endpoint.rstrip("/")
        self.provider_id = f"embedding:{self.endpoint}"
        self._api_key = api_key if api_key is not None else os.environ.get(EMBEDDING_KEY_ENV)
        self._gate = RequestGate(max_in_flight, requests_per_minute)
        self._attempts = attempts
        self._backoff_s = backoff_s
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else None
        body = post_json(
            self._client,
            self.endpoint + "/embed",
            {"texts": list(texts)},
            attempts=self._attempts,
            backoff_s=self._backoff_s,
            gate=self._gate,
            headers=headers,
        )
        vectors = body.get("vectors")
        if not isinstance(vectors, list):
            raise ProtocolError("embedding response missing 'vectors' list")
        return vectors

    def close(self) -> None:
        self._client.close()


class MockEmbeddingClient(EmbeddingClient):
    """Hash-seeded pseudorandom unit vectors; identical text, identical vector."""

    provider_id = "mock-embedding"

    def __init__(self, dimension: int = 32, cache: ResponseCache | None = None):
        super().__init__(cache=cache)
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self.dimension = dimension

    def _embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._vector(text) for text in texts]

    def _vector(self, text: str) -> list[float]:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = random.Random(seed)
        values = [rng.gauss(0.0, 1.0) for _ in range(self.dimension)]
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            values[0] = 1.0
            norm = 1.0
        return [v / norm for v in values]


def embed(client: EmbeddingClient, texts: Sequence[str]) -> list[EmbeddingVector]:
    """Embed texts through the client's cache; one vector per text, in order."""
    return client.embed(texts)
