"""Structured-output chat completions: live HTTP client and scripted playback.

Both gateways share :meth:`Gateway.complete_structured`, which validates the
response against the request's schema, retries transport failures with
exponential backoff, re-asks once with a JSON-only nudge on a schema
violation, and appends every exchange to an audit log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import httpx

from . import schemas
from .prompts import SCHEMA_NUDGE
from .schemas import SchemaViolation

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "DSRECON_API_KEY"


class GatewayError(RuntimeError):
    """Base class for failures inside a gateway call."""

    def __init__(self, message: str, raw: str | None = None) -> None:
        super().__init__(message)
        self.raw = raw


class TransportError(GatewayError):
    pass


class FixtureMiss(GatewayError):
    """A scripted gateway has no response for a request."""


class GatewayConfigError(GatewayError):
    pass


class StructuredOutputError(GatewayError):
    """The response still violated its schema after the re-ask."""

    def __init__(self, violation: SchemaViolation) -> None:
        super().__init__(str(violation), violation.raw)
        self.violation = violation
        self.fields = violation.fields


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    schema_id: str
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.schema_id not in schemas.SCHEMAS:
            raise ValueError(f"unknown schema id {self.schema_id!r}")

    def with_nudge(self) -> ChatRequest:
        return ChatRequest(
            self.system_text,
            f"{self.user_text}\n\n{SCHEMA_NUDGE}",
            self.schema_id,
            self.temperature,
            self.max_output_tokens,
        )


def fingerprint(request: ChatRequest) -> str:
    payload = json.dumps(
        [request.schema_id, request.system_text, request.user_text], ensure_ascii=False
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class AuditLog:
    """Append-only record of request/response pairs, safe across threads."""

    def __init__(self, path: str | Path | None = None) -> None:
        self._entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self.path = Path(path) if path else None

    def append(self, request: ChatRequest, response: str | None, latency_ms: float, error: str | None = None) -> None:
        entry = {
            "fingerprint": fingerprint(request),
            "request": asdict(request),
            "response": response,
            "latency_ms": round(latency_ms, 3),
        }
        if error:
            entry["error"] = error
        line = json.dumps(entry, ensure_ascii=False)
        with self._lock:
            self._entries.append(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    @property
    def entries(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def requests_for(self, schema_id: str) -> list[dict[str, Any]]:
        return [e["request"] for e in self.entries if e["request"]["schema_id"] == schema_id]

    def write_jsonl(self, path: str | Path) -> None:
        # sorted so concurrent runs produce identical files
        lines = sorted(json.dumps(e, ensure_ascii=False, sort_keys=True) for e in self.entries)
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class Gateway:
    """Shared retry/validation/audit logic. Subclasses implement :meth:`_send`."""

    max_retries: int = 2
    schema_reasks: int = 1
    backoff_base: float = 0.5

    def __init__(self, audit: AuditLog | None = None) -> None:
        self.audit = audit if audit is not None else AuditLog()

    def _send(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def _sleep(self, seconds: float) -> None:
        time.sleep(seconds)

    def _transport(self, request: ChatRequest) -> str:
        attempt = 0
        while True:
            start = time.perf_counter()
            try:
                raw = self._send(request)
            except TransportError as exc:
                self.audit.append(request, exc.raw, self._latency(start), error=str(exc))
                if attempt >= self.max_retries:
                    raise
                self._sleep(self.backoff_base * 2**attempt)
                attempt += 1
                continue
            self.audit.append(request, raw, self._latency(start))
            return raw

    def _latency(self, start: float) -> float:
        return (time.perf_counter() - start) * 1000.0

    def complete_structured(self, request: ChatRequest) -> dict[str, Any]:
        """Send ``request`` and return the schema-validated JSON value."""
        current = request
        for reask in range(self.schema_reasks + 1):
            raw = self._transport(current)
            try:
                return schemas.validate(request.schema_id, raw)
            except SchemaViolation as violation:
                if reask >= self.schema_reasks:
                    raise StructuredOutputError(violation) from violation
                logger.info("schema violation (%s); re-asking", violation)
                current = request.with_nudge()
        raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# Scripted playback
# --------------------------------------------------------------------------


@dataclass
class ScriptedFixture:
    """Canned responses keyed by ``(schema_id, fingerprint)``.

    ``fallback`` decides what happens for an unmatched request: ``"error"``
    raises :class:`FixtureMiss`; ``"empty-delta"`` answers ``memory_delta``
    requests with an empty delta and raises for every other schema.
    """

    responses: dict[tuple[str, str], Any] = field(default_factory=dict)
    fallback: str = "error"

    def __post_init__(self) -> None:
        if self.fallback not in ("error", "empty-delta"):
            raise ValueError(f"unknown fallback mode {self.fallback!r}")

    def add(self, request: ChatRequest, response: Any) -> None:
        self.responses[(request.schema_id, fingerprint(request))] = response

    def get(self, request: ChatRequest) -> Any:
        return self.responses.get((request.schema_id, fingerprint(request)))

    def __len__(self) -> int:
        return len(self.responses)

    def to_json(self) -> str:
        return json.dumps(
            {
                "fallback": self.fallback,
                "responses": {f"{s}:{fp}": v for (s, fp), v in sorted(self.responses.items())},
            },
            indent=1,
            sort_keys=True,
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> ScriptedFixture:
        d = json.loads(text)
        responses = {}
        for key, value in d["responses"].items():
            schema_id, fp = key.split(":", 1)
            responses[(schema_id, fp)] = value
        return cls(responses, d.get("fallback", "error"))

    @classmethod
    def load(cls, path: str | Path) -> ScriptedFixture:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_audit(cls, entries: Iterable[dict[str, Any]], fallback: str = "error") -> ScriptedFixture:
        """Build a fixture that replays every successful exchange in an audit log."""
        fx = cls(fallback=fallback)
        for e in entries:
            if e.get("error") or e.get("response") is None:
                continue
            fx.responses[(e["request"]["schema_id"], e["fingerprint"])] = e["response"]
        return fx


Responder = Callable[[ChatRequest], Any]


class ScriptedGateway(Gateway):
    """Deterministic playback. Looks up the fixture first, then ``responder``."""

    backoff_base = 0.0

    def __init__(
        self,
        fixture: ScriptedFixture | None = None,
        responder: Responder | None = None,
        audit: AuditLog | None = None,
    ) -> None:
        super().__init__(audit)
        self.fixture = fixture if fixture is not None else ScriptedFixture()
        self.responder = responder

    def _send(self, request: ChatRequest) -> str:
        value = self.fixture.get(request)
        if value is None and self.responder is not None:
            value = self.responder(request)
        if value is None:
            if self.fixture.fallback == "empty-delta" and request.schema_id == "memory_delta":
                value = schemas.EMPTY_DELTA
            else:
                raise FixtureMiss(
                    f"no scripted response for {request.schema_id} request {fingerprint(request)[:12]}"
                )
        return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)

    def _latency(self, start: float) -> float:
        return 0.0

    def recorded_fixture(self, fallback: str = "error") -> ScriptedFixture:
        return ScriptedFixture.from_audit(self.audit.entries, fallback)


# --------------------------------------------------------------------------
# Live OpenAI-compatible client
# --------------------------------------------------------------------------


@dataclass
class GatewayConfig:
    endpoint_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 2
    seed: int | None = None
    requests_per_minute: float | None = None
    temperature: float = 0.0
    json_schema_format: bool = True

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GatewayConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gateway config keys: {sorted(unknown)}")
        return cls(**d)


class _RateLimiter:
    def __init__(self, per_minute: float | None) -> None:
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


class LiveGateway(Gateway):
    """Chat-completions client for any OpenAI-compatible endpoint."""

    def __init__(
        self,
        config: GatewayConfig,
        audit: AuditLog | None = None,
        client: httpx.Client | None = None,
    ) -> None:
        super().__init__(audit)
        key = os.environ.get(config.api_key_env)
        if not key:
            raise GatewayConfigError(f"environment variable {config.api_key_env} is not set")
        self.config = config
        self.max_retries = config.max_retries
        self._headers = {"Authorization": f"Bearer {key}"}
        self._client = client or httpx.Client(timeout=config.timeout)
        self._limiter = _RateLimiter(config.requests_per_minute)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        payload: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if self.config.seed is not None:
            payload["seed"] = self.config.seed
        if self.config.json_schema_format:
            payload["response_format"] = {
                "type": "json_schema",
                "json_schema": {
                    "name": request.schema_id,
                    "schema": schemas.json_schema(request.schema_id),
                    "strict": False,
                },
            }
        else:
            payload["response_format"] = {"type": "json_object"}
        return payload

    def _send(self, request: ChatRequest) -> str:
        self._limiter.wait()
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=self._payload(request), headers=self._headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}", resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}", resp.text) from exc
