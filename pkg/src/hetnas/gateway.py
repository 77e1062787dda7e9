"""Chat-completion client for OpenAI-compatible endpoints, and a scripted local mock server."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Sequence

import requests

from .errors import ConfigError, ContextOverflow, TransportError

log = logging.getLogger(__name__)

_OVERFLOW_MARKERS = ("context_length_exceeded", "context length", "maximum context", "too many tokens")


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 1.0
    max_retries: int = 3
    timeout: float = 120.0
    log_path: str | None = None
    backoff: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must be in [0, 2]")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be non-negative")

    def api_key(self, required: bool = True) -> str | None:
        key = os.environ.get(self.api_key_env)
        if required and not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set")
        return key

    def to_dict(self) -> dict:
        return asdict(self)


class TranscriptLog:
    """Append-only JSON-lines sink. One record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        record = {**record, "timestamp": time.time()}
        line = json.dumps(record, ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")


def read_transcript(path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out


def transcript_responses(path) -> list[str]:
    """Assistant contents of a transcript, in order; feed to a scripted controller to replay a run."""
    return [r["content"] for r in read_transcript(path) if r.get("role") == "assistant"]


def _is_overflow(status: int, body: str) -> bool:
    if status not in (400, 413):
        return False
    low = body.lower()
    return any(m in low for m in _OVERFLOW_MARKERS)


def _retry_after(resp) -> float | None:
    value = resp.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def complete(
    cfg: GatewayConfig,
    system: str | None,
    messages: Sequence[tuple[str, str]],
    temperature: float | None = None,
    meta: dict | None = None,
    sleep: Callable[[float], None] = time.sleep,
    session: requests.Session | None = None,
) -> str:
    """Send one chat-completion request and return the first choice's content.

    Retries timeouts, connection failures and 5xx responses with exponential backoff;
    429 waits for the server's ``Retry-After`` when given. A context-length error raises
    :class:`ContextOverflow` immediately. ``meta`` (e.g. stage and iteration) is copied
    into every transcript record.
    """
    temp = cfg.temperature if temperature is None else temperature
    msgs = ([{"role": "system", "content": system}] if system else []) + [
        {"role": r, "content": c} for r, c in messages
    ]
    body = {"model": cfg.model, "messages": msgs, "temperature": temp}
    headers = {"Content-Type": "application/json"}
    key = cfg.api_key(required=False)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    sink = TranscriptLog(cfg.log_path) if cfg.log_path else None
    meta = dict(meta or {})
    url = cfg.endpoint.rstrip("/") + "/chat/completions"
    http = session or requests
    last = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        if sink:
            sink.write({"role": "user", "content": msgs[-1]["content"] if msgs else "", "event": "request",
                        "attempt": attempt, "model": cfg.model, "temperature": temp, **meta})
        delay = cfg.backoff * 2 ** attempt
        try:
            resp = http.post(url, json=body, headers=headers, timeout=cfg.timeout)
        except (requests.Timeout, requests.ConnectionError) as e:
            last = f"{type(e).__name__}: {e}"
            if sink:
                sink.write({"role": "error", "content": last, "event": "error", **meta})
        else:
            text = resp.text
            if resp.status_code == 200:
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as e:
                    raise TransportError(f"malformed completion payload: {e}") from None
                if sink:
                    sink.write({"role": "assistant", "content": content, "event": "response", **meta})
                return content
            if sink:
                sink.write({"role": "error", "content": text, "event": "error", "status": resp.status_code, **meta})
            if _is_overflow(resp.status_code, text):
                raise ContextOverflow(f"context length exceeded ({resp.status_code})")
            last = f"HTTP {resp.status_code}: {text[:200]}"
            if resp.status_code == 429:
                delay = _retry_after(resp) if _retry_after(resp) is not None else delay
            elif resp.status_code < 500:
                raise TransportError(last)
        if attempt < cfg.max_retries:
            log.info("chat completion attempt %d failed (%s); retrying in %.2fs", attempt + 1, last, delay)
            sleep(delay)
    raise TransportError(f"giving up after {cfg.max_retries + 1} attempts: {last}")


def completion_payload(content: str) -> dict:
    return {"id": "mock", "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]}


EXHAUSTED_BODY = {"error": {"message": "mock script exhausted", "type": "mock_exhausted"}}


class MockServer:
    """Local chat-completion endpoint serving a fixed script of responses in order.

    Script items are either a string (a 200 completion with that content) or a dict
    with ``status`` and optional ``body`` (dict or str) and ``headers``. Requests past
    the end of the script get a 500 with :data:`EXHAUSTED_BODY`. Every request body is
    recorded in :attr:`requests`, headers in :attr:`headers`.

    Use as a context manager; :attr:`endpoint` is the base URL to configure.
    """

    def __init__(self, script: Sequence[str | dict]):
        self.script = list(script)
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(n)
                try:
                    body = json.loads(raw)
                except ValueError:
                    body = {"_raw": raw.decode("utf-8", "replace")}
                with server._lock:
                    i = len(server.requests)
                    server.requests.append(body)
                    server.headers.append(dict(self.headers))
                    item = server.script[i] if i < len(server.script) else None
                if item is None:
                    status, payload, extra = 500, EXHAUSTED_BODY, {}
                elif isinstance(item, str):
                    status, payload, extra = 200, completion_payload(item), {}
                else:
                    status = int(item.get("status", 200))
                    payload = item.get("body", completion_payload(item["content"]) if "content" in item else {})
                    extra = item.get("headers", {})
                data = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                for k, v in extra.items():
                    self.send_header(k, str(v))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> MockServer:
        if not self._thread.is_alive():
            self._thread.start()
        return self

    def stop(self) -> None:
        # shutdown() blocks until serve_forever exits, so only call it on a running server
        if self._thread.is_alive():
            self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> MockServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def mock_server(script: Sequence[str | dict]) -> MockServer:
    """Start a :class:`MockServer`; stop it with ``.stop()`` or use it in a ``with`` block."""
    return MockServer(script).start()


def overflow_response() -> dict:
    """Script item imitating a context-length error."""
    return {"status": 400, "body": {"error": {
        "message": "This model's maximum context length is 8192 tokens.",
        "type": "invalid_request_error", "code": "context_length_exceeded"}}}
