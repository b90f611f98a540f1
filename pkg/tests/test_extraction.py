from __future__ import annotations

from datetime import date, datetime
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from dsrecon.corpus import HybridTranscript, Session, make_turns
from dsrecon.extraction import (
    ExtractionError,
    build_extraction_prompt,
    extract_turn,
    read_trace,
    replay_corpus,
    replay_transcript,
    write_trace,
)
from dsrecon.llm_gateway import ScriptedFixture, ScriptedGateway
from dsrecon.narrative_memory import NO_MEMORIES, MemoryDelta, MemoryStore
from dsrecon.prompts import EXTRACTION_SYSTEM_PROMPT

FIXTURES = Path(__file__).parent / "fixtures"
EMPTY = {"inserts": [], "updates": [], "deletes": []}
LISINOPRIL = "Patient stopped taking lisinopril a few days ago due to dizziness (reported Aug 21, 2019)"


def session(sid: str, day: date, pairs: list[tuple[str, str]]) -> Session:
    return Session(sid, day, make_turns(pairs, datetime.combine(day, datetime.min.time()).replace(hour=9)))


def lisinopril_session() -> Session:
    return session(
        "p1-r000",
        date(2019, 8, 21),
        [
            ("coach", "How did the walking go this week?"),
            ("patient", "I stopped taking that lisinopril a few days ago because I think it was making me dizzy."),
            ("coach", "Thanks for telling me. Let's keep the walks short until you talk to your doctor."),
        ],
    )


class Echo:
    """Gateway that records every request and answers with a queued or empty delta."""

    def __init__(self, answers: list[dict] | None = None) -> None:
        self.requests = []
        self.answers = list(answers or [])

    def complete_structured(self, request):
        self.requests.append(request)
        return self.answers.pop(0) if self.answers else EMPTY


def test_prompt_empty_store_sentinel_and_schema():
    req = build_extraction_prompt(MemoryStore("p1"), date(2019, 8, 21), lisinopril_session().turns[:2])
    assert req.system_text == EXTRACTION_SYSTEM_PROMPT
    assert req.schema_id == "memory_delta"
    assert NO_MEMORIES in req.user_text
    assert "SESSION DATE: 2019-08-21" in req.user_text


def test_prompt_lists_existing_ids():
    store = MemoryStore("p1")
    for i in range(3):
        store.apply_delta(MemoryDelta.from_dict({"inserts": [{"content": f"fact {i}", "category": "fact"}]}), "s", "2019-08-01")
    req = build_extraction_prompt(store, "2019-08-21", lisinopril_session().turns[:2])
    assert "mem_003" in req.user_text
    assert NO_MEMORIES not in req.user_text


def test_prompt_matches_golden():
    store = MemoryStore("p1")
    store.apply_delta(
        MemoryDelta.from_dict({"inserts": [{"content": "Patient walks at the park on weekends", "category": "lifestyle"}]}),
        "p1-r-prev",
        "2019-08-14",
    )
    req = build_extraction_prompt(store, date(2019, 8, 21), lisinopril_session().turns[:2])
    golden = (FIXTURES / "extraction_prompt.golden.txt").read_text()
    assert req.user_text == golden


def test_extract_turn_success_case():
    s = lisinopril_session()
    store = MemoryStore("p1")
    gw = Echo([{"inserts": [{"content": LISINOPRIL, "category": "medication"}], "updates": [], "deletes": []}])
    delta, report = extract_turn(gw, store, s, 1)
    assert len(store) == 1 and len(report.changed) == 1
    rec = store.records()[0]
    assert rec.content == LISINOPRIL and rec.created_at == "2019-08-21" and rec.source_session == "p1-r000"


def test_extract_turn_empty_delta():
    store = MemoryStore("p1")
    _, report = extract_turn(Echo(), store, lisinopril_session(), 1)
    assert len(store) == 0 and report.changed == []


def test_extract_turn_guard_branches():
    store = MemoryStore("p1")
    store.apply_delta(MemoryDelta.from_dict({"inserts": [{"content": LISINOPRIL, "category": "medication"}]}), "s0", "2019-08-20")
    delta = {
        "inserts": [{"content": LISINOPRIL.upper(), "category": "medication"}],
        "updates": [{"memory_id": "mem_999", "new_content": "Patient feels dizzy on stairs", "category": "health"}],
        "deletes": [],
    }
    _, report = extract_turn(Echo([delta]), store, lisinopril_session(), 1)
    assert len(report.rejected) == 1 and len(report.coerced) == 1
    assert len(store) == 2


def test_extract_turn_rejects_coach_turn():
    with pytest.raises(ValueError):
        extract_turn(Echo(), MemoryStore("p1"), lisinopril_session(), 0)


def test_extraction_error_carries_coordinates():
    gw = ScriptedGateway(ScriptedFixture())
    with pytest.raises(ExtractionError) as info:
        extract_turn(gw, MemoryStore("p1"), lisinopril_session(), 1, "p1")
    e = info.value
    assert (e.patient_id, e.session_id, e.turn_index) == ("p1", "p1-r000", 1)


def three_sessions() -> HybridTranscript:
    s0 = session("p1-r000", date(2019, 8, 1), [("coach", "Hi"), ("patient", "I walked twice"), ("coach", "Nice"), ("patient", "My knee hurts")])
    s1 = session("p1-r001", date(2019, 8, 8), [("patient", "I joined a gym"), ("coach", "Great")])
    s2 = session("p1-r002", date(2019, 8, 15), [("coach", "Hello"), ("patient", "Knee is better"), ("patient", "Back to walking")])
    return HybridTranscript("p1", [s0, s1, s2])


def test_trace_length_equals_patient_turns_and_context_discipline():
    t = three_sessions()
    gw = Echo()
    trace = replay_transcript(gw, t)
    assert len(trace) == 5
    for req, e in zip(gw.requests, trace.entries):
        sess = next(s for s in t.sessions if s.session_id == e.session_id)
        assert sess.turns[e.turn_index].text in req.user_text
        for later in sess.turns[e.turn_index + 1 :]:
            assert later.text not in req.user_text


def test_no_patient_turns_gives_empty_trace():
    t = HybridTranscript("p1", [session("p1-r000", date(2019, 8, 1), [("coach", "Anyone there?")])])
    assert len(replay_transcript(Echo(), t)) == 0


def test_session_granularity_batches():
    gw = Echo()
    trace = replay_transcript(gw, three_sessions(), granularity="session")
    assert [(e.session_id, e.turn_index) for e in trace.entries] == [("p1-r000", 3), ("p1-r001", 0), ("p1-r002", 2)]


def _inserting_answers(n: int) -> list[dict]:
    return [{"inserts": [{"content": f"memory number {i}", "category": "fact"}], "updates": [], "deletes": []} for i in range(n)]


def test_snapshots_follow_counts_and_lookup():
    answers = _inserting_answers(5)
    answers[3] = {"inserts": [], "updates": [], "deletes": [{"memory_id": "mem_001", "justification": "gone"}]}
    trace = replay_transcript(Echo(answers), three_sessions())
    counts = [e.memory_count for e in trace.entries]
    assert counts == [1, 2, 3, 2, 3]
    prev = 0
    for e in trace.entries:
        ins = sum(1 for a in e.report.applied if a[0] == "insert")
        dels = sum(1 for a in e.report.applied if a[0] == "delete")
        assert len(e.snapshot.records()) - prev == ins - dels
        prev = len(e.snapshot.records())
    # state after a coach turn is the state after the last patient turn before it
    assert len(trace.snapshot_at("p1-r002", 0).records()) == 3
    assert len(trace.snapshot_at("p1-r000", 1).records()) == 1
    assert trace.final_memory_count == 3


def test_replay_determinism_and_trace_round_trip(tmp_path):
    t = three_sessions()
    a = replay_transcript(Echo(_inserting_answers(5)), t)
    b = replay_transcript(Echo(_inserting_answers(5)), t)
    write_trace(tmp_path / "a.jsonl", [a])
    write_trace(tmp_path / "b.jsonl", [b])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    loaded = read_trace(tmp_path / "a.jsonl")["p1"]
    loaded.rebuild_snapshots({s.session_id: s.session_date.isoformat() for s in t.sessions})
    assert loaded.final_store == a.final_store
    assert [e.snapshot for e in loaded.entries] == [e.snapshot for e in a.entries]


def test_failing_patient_does_not_stop_others():
    good = three_sessions()
    bad = HybridTranscript("p2", [session("p2-r000", date(2019, 8, 1), [("patient", "hello")])])

    class Picky(Echo):
        def complete_structured(self, request):
            if "hello" in request.user_text:
                raise ExtractionError("p2", "p2-r000", 0, RuntimeError("boom"))
            return super().complete_structured(request)

    out = replay_corpus(Picky(), [good, bad], workers=2)
    assert len(out["p1"]) == 5
    assert isinstance(out["p2"], ExtractionError)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_count_delta_property(ops):
    """Record counts move by applied inserts minus applied deletes at every turn."""
    day = date(2019, 9, 1)
    pairs = [("patient", f"utterance {i}") for i in range(len(ops))]
    t = HybridTranscript("p", [Session("p-r000", day, make_turns(pairs, datetime(2019, 9, 1, 8)))])
    answers = []
    for i, op in enumerate(ops):
        if op == 0:
            answers.append(EMPTY)
        elif op == 1:
            answers.append({"inserts": [{"content": f"m{i}", "category": "fact"}], "updates": [], "deletes": []})
        elif op == 2:
            answers.append({"inserts": [], "updates": [], "deletes": [{"memory_id": f"mem_{i:03d}", "justification": ""}]})
        else:
            answers.append({"inserts": [{"content": "m0", "category": "fact"}], "updates": [], "deletes": []})
    trace = replay_transcript(Echo(answers), t)
    prev = 0
    for e in trace.entries:
        net = sum(1 for a in e.report.applied if a[0] == "insert") - sum(1 for a in e.report.applied if a[0] == "delete")
        assert e.memory_count - prev == net
        prev = e.memory_count
