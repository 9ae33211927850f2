"""Chat-completion providers: live HTTP, fixture replay/capture, and scripted."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import httpx

log = logging.getLogger(__name__)

API_KEY_ENV = "UAVREWARD_API_KEY"
ROLES = ("system", "user", "assistant")


class ProviderError(RuntimeError):
    """Base class; any subclass means the response_success gate fails."""

    kind = "provider_error"


class ProviderTimeout(ProviderError):
    kind = "timeout"


class ProviderTransportError(ProviderError):
    kind = "transport"


class ProviderHTTPError(ProviderError):
    kind = "http_status"

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class EmptyResponse(ProviderError):
    kind = "empty_content"


class MissingFixture(ProviderError):
    kind = "missing_fixture"


class FixtureCollision(RuntimeError):
    pass


class MissingCredentials(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.7
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"invalid role {m.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def body(self) -> dict:
        body = {"model": self.model,
                "messages": [asdict(m) for m in self.messages],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens}
        if self.seed is not None:
            body["seed"] = self.seed
        return body

    def digest(self) -> str:
        canon = json.dumps(self.body(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_body(cls, body: dict) -> "ChatRequest":
        return cls(model=body["model"], messages=tuple(Message(**m) for m in body["messages"]),
                   temperature=body["temperature"], max_tokens=body["max_tokens"], seed=body.get("seed"))


@dataclass(frozen=True)
class Completion:
    content: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    api_key_env: str = API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise MissingCredentials(f"environment variable {self.api_key_env} is not set")
        return key


class LiveProvider:
    """OpenAI-compatible ``POST /chat/completions`` client with retry and backoff."""

    def __init__(self, config: ProviderConfig = ProviderConfig(), transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.config = config
        self._key = config.api_key()
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep

    def complete(self, request: ChatRequest) -> Completion:
        cfg = self.config
        headers = {"Authorization": f"Bearer {self._key}", "Content-Type": "application/json"}
        last: ProviderError | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(cfg.endpoint_url, json=request.body(), headers=headers)
            except httpx.TimeoutException as exc:
                last = ProviderTimeout(str(exc) or "request timed out")
                continue
            except httpx.TransportError as exc:
                last = ProviderTransportError(str(exc))
                continue
            if resp.status_code >= 500:
                last = ProviderHTTPError(resp.status_code, resp.text)
                log.info("attempt %d got HTTP %d, retrying", attempt + 1, resp.status_code)
                continue
            if not 200 <= resp.status_code < 300:
                raise ProviderHTTPError(resp.status_code, resp.text)
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise EmptyResponse("response carried no choices[0].message.content") from None
            if not content or not content.strip():
                raise EmptyResponse("provider returned empty content")
            return Completion(content, {"attempts": attempt + 1, "status": resp.status_code})
        raise last

    def close(self):
        self._client.close()


class FixtureStore:
    """One JSON file per request digest: ``{request, response, timestamp}``."""

    def __init__(self, directory, capture: bool = False):
        self.directory = Path(directory)
        self.capture = capture

    def path_for(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def load(self, request: ChatRequest) -> str:
        path = self.path_for(request.digest())
        if not path.exists():
            raise MissingFixture(f"no fixture for request digest {request.digest()} in {self.directory}")
        return json.loads(path.read_text())["response"]

    def record(self, request: ChatRequest, response: str) -> Path | None:
        """Persist ``response`` for ``request``; a no-op unless capture is enabled."""
        if not self.capture:
            return None
        path = self.path_for(request.digest())
        if path.exists():
            existing = json.loads(path.read_text())["response"]
            if existing != response:
                raise FixtureCollision(f"fixture {path.name} already holds a different response")
            return path
        self.directory.mkdir(parents=True, exist_ok=True)
        payload = {"request": request.body(), "response": response,
                   "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
        return path


def record_fixture(store: FixtureStore, request: ChatRequest, response: str) -> Path | None:
    return store.record(request, response)


class FixtureProvider:
    """Replays recorded responses; with ``upstream`` and capture on, records misses."""

    def __init__(self, store: FixtureStore, upstream=None):
        self.store = store
        self.upstream = upstream

    def complete(self, request: ChatRequest) -> Completion:
        try:
            return Completion(self.store.load(request), {"fixture": request.digest()})
        except MissingFixture:
            if self.upstream is None or not self.store.capture:
                raise
        result = self.upstream.complete(request)
        self.store.record(request, result.content)
        return result


class ScriptedProvider:
    """Returns queued responses in order; exceptions in the queue are raised.

    When the queue runs dry the last item repeats if ``repeat_last`` is set.
    """

    def __init__(self, responses, repeat_last: bool = True):
        self._queue = deque(responses)
        self._last = None
        self.repeat_last = repeat_last
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> Completion:
        self.requests.append(request)
        if self._queue:
            item = self._queue.popleft()
            self._last = item
        elif self.repeat_last and self._last is not None:
            item = self._last
        else:
            raise EmptyResponse("scripted provider exhausted")
        if isinstance(item, BaseException):
            raise item
        if not item:
            raise EmptyResponse("scripted empty response")
        return Completion(item, {"scripted": True})
