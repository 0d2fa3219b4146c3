"""Shared fixtures: corpus builders and a threaded mock service server.

The mock server speaks all three wire protocols (/complete, /embed,
/rescore) over real HTTP on a loopback port, logs every request body, and
can be scripted to return failures, so client retry and protocol-validation
paths are exercised against an actual socket.
"""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from mdqa.corpus import Article, Passage, load_qa_instances, window_split
from mdqa.index import tokenize

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def overlap_logprob(query: str, text: str) -> float:
    """Deterministic fake relevance: more token overlap, closer to zero."""
    query_tokens = set(tokenize(query))
    shared = len(query_tokens & set(tokenize(text)))
    return -1.0 / (1.0 + shared)


def hash_vector(text: str, dimension: int = 8) -> list[float]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    raw = [digest[i] - 127.5 for i in range(dimension)]
    norm = sum(v * v for v in raw) ** 0.5
    return [v / norm for v in raw]


def default_completion(prompt: str) -> str:
    token = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:10]
    return f" served-{token}"


class MockServiceServer:
    """One HTTP server for completion, embedding, and rescoring endpoints.

    `requests` collects (path, payload) in arrival order. `script(...)`
    enqueues one-shot responses (status, body) that take precedence over the
    default behavior; body may be a dict (sent as JSON) or raw bytes.
    """

    def __init__(self):
        self.requests: list[tuple[str, dict]] = []
        self.scripted: list[tuple[int, object]] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with outer._lock:
                    outer.requests.append((self.path, payload))
                    scripted = outer.scripted.pop(0) if outer.scripted else None
                if scripted is not None:
                    status, body = scripted
                    raw = body if isinstance(body, bytes) else json.dumps(body).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(raw)))
                    self.end_headers()
                    self.wfile.write(raw)
                    return
                self._respond(outer.handle(self.path, payload))

            def _respond(self, body: dict):
                raw = json.dumps(body).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def handle(self, path: str, payload: dict) -> dict:
        if path == "/complete":
            return {"text": default_completion(payload["prompt"])}
        if path == "/embed":
            return {"vectors": [hash_vector(text) for text in payload["texts"]]}
        if path == "/rescore":
            return {
                "scores": [
                    overlap_logprob(payload["query"], document["text"])
                    for document in payload["documents"]
                ]
            }
        return {"error": f"unknown path {path}"}

    def script(self, status: int, body: object) -> None:
        with self._lock:
            self.scripted.append((status, body))

    def paths(self) -> list[str]:
        with self._lock:
            return [path for path, _ in self.requests]

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_server():
    server = MockServiceServer()
    yield server
    server.close()


@pytest.fixture(scope="session")
def fixture_articles() -> list[Article]:
    from mdqa.corpus import load_articles

    return load_articles(FIXTURES / "articles.jsonl")


@pytest.fixture(scope="session")
def fixture_passages(fixture_articles) -> list[Passage]:
    return [
        passage
        for article in fixture_articles
        for passage in window_split(article, 3)
    ]


@pytest.fixture(scope="session")
def fixture_questions():
    return load_qa_instances(FIXTURES / "questions.jsonl")


def make_passage(pid: str, text: str, title: str = "", article_id: str = "") -> Passage:
    base, _, window = pid.rpartition("#")
    return Passage(
        id=pid,
        article_id=article_id or base or pid,
        title=title or (base or pid).title(),
        text=text,
        window_index=int(window) if window.isdigit() else 0,
    )
