"""Shared HTTP plumbing: JSON POST with retries, in-flight and rate limits."""

from __future__ import annotations

import logging
import threading
import time

import httpx

from .errors import ProtocolError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_ATTEMPTS = 3
DEFAULT_BACKOFF_S = 1.0
DEFAULT_TIMEOUT_S = 60.0


class RequestGate:
    """Bounds concurrent requests and enforces a requests-per-minute ceiling."""

    def __init__(self, max_in_flight: int = 4, requests_per_minute: float | None = None):
        self._semaphore = threading.Semaphore(max_in_flight)
        self._min_interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def __enter__(self):
        self._semaphore.acquire()
        if self._min_interval:
            with self._lock:
                now = time.monotonic()
                wait = self._next_allowed - now
                self._next_allowed = max(now, self._next_allowed) + self._min_interval
            if wait > 0:
                time.sleep(wait)
        return self

    def __exit__(self, *exc_info):
        self._semaphore.release()
        return False


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    attempts: int = DEFAULT_ATTEMPTS,
    backoff_s: float = DEFAULT_BACKOFF_S,
    gate: RequestGate | None = None,
    headers: dict[str, str] | None = None,
) -> dict:
    """POST a JSON body and return the decoded JSON response.

    Transport failures and 5xx/429 responses are retried with exponential
    backoff; other HTTP errors and malformed bodies fail immediately.
    """
    last_error: Exception | None = None
    for attempt in range(attempts):
        if attempt:
            delay = backoff_s * 2 ** (attempt - 1)
            logger.warning("retrying POST %s in %.1fs (%s)", url, delay, last_error)
            time.sleep(delay)
        try:
            if gate is not None:
                with gate:
                    response = client.post(url, json=payload, headers=headers)
            else:
                response = client.post(url, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            last_error = exc
            continue
        if response.status_code >= 500 or response.status_code == 429:
            last_error = TransportError(f"POST {url} -> HTTP {response.status_code}")
            continue
        if response.status_code != 200:
            raise TransportError(f"POST {url} -> HTTP {response.status_code}: {response.text[:200]}")
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolError(f"POST {url}: response is not JSON") from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"POST {url}: response is not a JSON object")
        return body
    raise TransportError(f"POST {url} failed after {attempts} attempts: {last_error}")
