from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from dsrecon.llm_gateway import (
    AuditLog,
    ChatRequest,
    FixtureMiss,
    GatewayConfig,
    GatewayConfigError,
    LiveGateway,
    ScriptedFixture,
    ScriptedGateway,
    StructuredOutputError,
    TransportError,
    fingerprint,
)
from dsrecon.prompts import SCHEMA_NUDGE

FIXTURES = Path(__file__).parent / "fixtures"

WORKED_RESULT = {
    "contradiction_type": "gap_patient",
    "confidence": 0.95,
    "clinical_severity": "medium",
    "justification": "Recurring sinus issue and an expected Amoxicillin prescription not in the record.",
    "fhir_resources_considered": [
        {
            "resource_type": "Condition",
            "code_system": "SNOMED-CT",
            "code_value": "40055000",
            "display": "Chronic sinusitis (disorder)",
        },
        {
            "resource_type": "MedicationRequest",
            "code_system": "RxNorm",
            "code_value": "308182",
            "display": "Amoxicillin 250 MG Oral Capsule (stopped)",
        },
    ],
}


def req(text: str = "hello", schema: str = "reconciliation_result") -> ChatRequest:
    return ChatRequest("sys", text, schema)


def test_fingerprint_is_stable_and_sensitive():
    assert fingerprint(req("abc")) == fingerprint(req("abc"))
    assert fingerprint(req("abc")) != fingerprint(req("abd"))
    assert fingerprint(req("abc")) != fingerprint(req("abc", "judge_event"))
    # temperature is not part of the identity
    assert fingerprint(ChatRequest("sys", "abc", "judge_event", 0.7)) == fingerprint(req("abc", "judge_event"))


def test_hundred_requests_have_distinct_fingerprints():
    fps = {fingerprint(req(f"request number {i}")) for i in range(100)}
    assert len(fps) == 100


def test_unknown_schema_is_rejected():
    with pytest.raises(ValueError):
        ChatRequest("", "x", "free_text")


def test_scripted_returns_canned_json():
    fx = ScriptedFixture()
    fx.add(req(), WORKED_RESULT)
    value = ScriptedGateway(fx).complete_structured(req())
    assert value["confidence"] == 0.95
    assert len(value["fhir_resources_considered"]) == 2


def test_scripted_miss_and_empty_delta_fallback():
    with pytest.raises(FixtureMiss):
        ScriptedGateway(ScriptedFixture()).complete_structured(req())
    gw = ScriptedGateway(ScriptedFixture(fallback="empty-delta"))
    assert gw.complete_structured(req(schema="memory_delta")) == {"inserts": [], "updates": [], "deletes": []}
    with pytest.raises(FixtureMiss):
        gw.complete_structured(req(schema="judge_event"))


def test_missing_field_names_the_field():
    bad = dict(WORKED_RESULT)
    del bad["contradiction_type"]
    fx = ScriptedFixture()
    fx.add(req(), bad)
    fx.add(req().with_nudge(), bad)
    with pytest.raises(StructuredOutputError) as info:
        ScriptedGateway(fx).complete_structured(req())
    assert "contradiction_type" in info.value.fields


def test_schema_violation_reasks_once_with_nudge():
    fx = ScriptedFixture()
    fx.add(req(), {"contradiction_type": "maybe"})
    fx.add(req().with_nudge(), WORKED_RESULT)
    gw = ScriptedGateway(fx)
    assert gw.complete_structured(req())["contradiction_type"] == "gap_patient"
    sent = [e["request"]["user_text"] for e in gw.audit.entries]
    assert sent == ["hello", f"hello\n\n{SCHEMA_NUDGE}"]


def test_fixture_round_trip_and_audit_replay(tmp_path):
    fx = ScriptedFixture()
    fx.add(req("a"), WORKED_RESULT)
    fx.add(req("b", "judge_event"), {"verdict": "MATCH", "content_fidelity": 5, "reasoning": "ok"})
    fx.save(tmp_path / "f.json")
    back = ScriptedFixture.load(tmp_path / "f.json")
    assert back.responses == fx.responses

    gw = ScriptedGateway(back)
    first = [gw.complete_structured(req("a")), gw.complete_structured(req("b", "judge_event"))]
    gw.audit.write_jsonl(tmp_path / "audit.jsonl")
    replayed = ScriptedGateway(ScriptedFixture.from_audit(AuditLog.read_jsonl(tmp_path / "audit.jsonl")))
    assert [replayed.complete_structured(req("a")), replayed.complete_structured(req("b", "judge_event"))] == first


def test_audit_file_is_sorted_and_scripted_latency_is_zero(tmp_path):
    fx = ScriptedFixture()
    for t in ("z", "a", "m"):
        fx.add(req(t), WORKED_RESULT)
    gw = ScriptedGateway(fx)
    for t in ("z", "a", "m"):
        gw.complete_structured(req(t))
    gw.audit.write_jsonl(tmp_path / "a.jsonl")
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert lines == sorted(lines)
    assert all(json.loads(x)["latency_ms"] == 0.0 for x in lines)


# -- live client over a mock transport -------------------------------------


def _completion(content: str) -> dict:
    return {"choices": [{"message": {"content": content}}]}


class NoSleep(LiveGateway):
    def _sleep(self, seconds: float) -> None:
        self.slept = getattr(self, "slept", []) + [seconds]


def _live(handler, monkeypatch, **cfg) -> NoSleep:
    monkeypatch.setenv("DSRECON_API_KEY", "test-key")
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return NoSleep(GatewayConfig(endpoint_url="https://llm.test/v1", **cfg), client=client)


def test_live_requires_key(monkeypatch):
    monkeypatch.delenv("DSRECON_API_KEY", raising=False)
    with pytest.raises(GatewayConfigError):
        LiveGateway(GatewayConfig())


def test_live_payload_and_parse(monkeypatch):
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append((str(request.url), request.headers["authorization"], json.loads(request.content)))
        return httpx.Response(200, json=_completion(json.dumps(WORKED_RESULT)))

    gw = _live(handler, monkeypatch, seed=11)
    assert gw.complete_structured(req())["clinical_severity"] == "medium"
    url, auth, body = seen[0]
    assert url == "https://llm.test/v1/chat/completions"
    assert auth == "Bearer test-key"
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "hello"}]
    assert body["temperature"] == 0.0 and body["seed"] == 11
    assert body["response_format"]["json_schema"]["name"] == "reconciliation_result"


def test_live_retries_transport_errors_with_backoff(monkeypatch):
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json=_completion(json.dumps(WORKED_RESULT)))

    gw = _live(handler, monkeypatch)
    assert gw.complete_structured(req())["confidence"] == 0.95
    assert gw.slept == [0.5, 1.0]
    assert [e.get("error") is not None for e in gw.audit.entries] == [True, True, False]


def test_live_gives_up_after_max_retries(monkeypatch):
    gw = _live(lambda r: httpx.Response(500, text="down"), monkeypatch, max_retries=1)
    with pytest.raises(TransportError):
        gw.complete_structured(req())
    assert len(gw.audit) == 2


def test_live_strips_code_fences(monkeypatch):
    fenced = "```json\n" + json.dumps(WORKED_RESULT) + "\n```"
    gw = _live(lambda r: httpx.Response(200, json=_completion(fenced)), monkeypatch)
    assert gw.complete_structured(req())["contradiction_type"] == "gap_patient"
