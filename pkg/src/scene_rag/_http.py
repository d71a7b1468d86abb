"""JSON-over-HTTP POST with bounded retries, shared by the remote clients."""

from __future__ import annotations

import json
import logging
import time

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "SCENE_RAG_API_KEY"
DEFAULT_ATTEMPTS = 3
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_BACKOFF_S = 0.5

_EXCERPT = 200


class EndpointError(RuntimeError):
    """The remote service failed: transport error or non-2xx status."""

    def __init__(self, message, *, status=None, body_excerpt="", attempts=1, retryable=False):
        super().__init__(message)
        self.status = status
        self.body_excerpt = body_excerpt
        self.attempts = attempts
        self.retryable = retryable


class ProtocolError(RuntimeError):
    """The remote service answered 2xx but the payload breaks the wire contract."""


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


def post_json(
    url: str,
    payload: dict,
    *,
    api_key: str | None = None,
    timeout: float = DEFAULT_TIMEOUT_S,
    max_attempts: int = DEFAULT_ATTEMPTS,
    backoff: float = DEFAULT_BACKOFF_S,
    transport: httpx.BaseTransport | None = None,
) -> dict:
    """POST ``payload`` and return the decoded JSON object.

    Timeouts, connection failures, 429 and 5xx are retried with exponential
    backoff (``backoff * 2**i`` seconds) up to ``max_attempts`` requests in
    total.  Any other non-2xx status fails immediately.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
    last: EndpointError | None = None
    with httpx.Client(timeout=timeout, transport=transport) as client:
        for attempt in range(1, max_attempts + 1):
            try:
                resp = client.post(url, content=body, headers=headers)
            except httpx.TransportError as exc:
                last = EndpointError(
                    f"request to {url} failed: {exc.__class__.__name__}: {exc}",
                    attempts=attempt,
                    retryable=True,
                )
            else:
                if 200 <= resp.status_code < 300:
                    try:
                        data = resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{url} returned invalid JSON: {exc}") from None
                    if not isinstance(data, dict):
                        raise ProtocolError(f"{url} returned {type(data).__name__}, expected an object")
                    return data
                excerpt = resp.text[:_EXCERPT]
                last = EndpointError(
                    f"{url} returned HTTP {resp.status_code}: {excerpt}",
                    status=resp.status_code,
                    body_excerpt=excerpt,
                    attempts=attempt,
                    retryable=_retryable(resp.status_code),
                )
                if not last.retryable:
                    raise last
            if attempt < max_attempts:
                delay = backoff * 2 ** (attempt - 1)
                logger.warning("%s (attempt %d/%d), retrying in %.2fs", last, attempt, max_attempts, delay)
                time.sleep(delay)
    assert last is not None
    raise EndpointError(
        f"giving up after {max_attempts} attempts: {last}",
        status=last.status,
        body_excerpt=last.body_excerpt,
        attempts=max_attempts,
        retryable=True,
    )
