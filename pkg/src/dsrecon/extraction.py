"""Per-turn delta extraction and transcript replay."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Iterable

from .corpus import HybridTranscript, Session, Turn
from .llm_gateway import ChatRequest, Gateway, GatewayError
from .narrative_memory import (
    ApplyReport,
    MemoryDelta,
    MemoryRecord,
    MemorySnapshot,
    MemoryStore,
    extraction_view,
)
from .prompts import EXTRACTION_SYSTEM_PROMPT

logger = logging.getLogger(__name__)


class ExtractionError(GatewayError):
    def __init__(self, patient_id: str, session_id: str, turn_index: int, cause: Exception) -> None:
        super().__init__(
            f"extraction failed at {patient_id}/{session_id} turn {turn_index}: {cause}",
            getattr(cause, "raw", None),
        )
        self.patient_id = patient_id
        self.session_id = session_id
        self.turn_index = turn_index


def format_dialogue(turns: Iterable[Turn]) -> str:
    return "\n".join(f"{t.speaker}: {t.text}" for t in turns)


def build_extraction_prompt(
    store: MemoryStore | MemorySnapshot, session_date: date | str, turns: Iterable[Turn]
) -> ChatRequest:
    when = session_date.isoformat() if isinstance(session_date, date) else session_date
    user = (
        f"SESSION DATE: {when}\n\n"
        f"EXISTING MEMORIES:\n{extraction_view(store)}\n\n"
        f"CONVERSATION:\n{format_dialogue(turns)}"
    )
    return ChatRequest(system_text=EXTRACTION_SYSTEM_PROMPT, user_text=user, schema_id="memory_delta")


def extract_turn(
    gateway: Gateway,
    store: MemoryStore,
    session: Session,
    turn_index: int,
    patient_id: str = "",
) -> tuple[MemoryDelta, ApplyReport]:
    """Extract and apply the delta for the patient turn at ``turn_index``.

    The model sees the current session up to and including that turn.
    """
    if session.turns[turn_index].speaker != "patient":
        raise ValueError("extraction runs on patient turns only")
    request = build_extraction_prompt(store, session.session_date, session.turns[: turn_index + 1])
    try:
        value = gateway.complete_structured(request)
    except GatewayError as exc:
        raise ExtractionError(patient_id or store.patient_id, session.session_id, turn_index, exc) from exc
    delta = MemoryDelta.from_dict(value)
    report = store.apply_delta(delta, session.session_id, session.session_date.isoformat())
    return delta, report


@dataclass
class TraceEntry:
    patient_id: str
    session_id: str
    session_kind: str
    turn_index: int
    delta: MemoryDelta
    report: ApplyReport
    snapshot: MemorySnapshot | None = field(default=None, repr=False, compare=False)
    memory_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "patient_id": self.patient_id,
            "session_id": self.session_id,
            "session_kind": self.session_kind,
            "turn_index": self.turn_index,
            "delta": self.delta.to_dict(),
            "report": self.report.to_dict(),
            "memory_count": self.memory_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TraceEntry:
        return cls(
            d["patient_id"],
            d["session_id"],
            d["session_kind"],
            d["turn_index"],
            MemoryDelta.from_dict(d["delta"]),
            ApplyReport.from_dict(d["report"]),
            memory_count=d["memory_count"],
        )


@dataclass
class ReplayTrace:
    patient_id: str
    entries: list[TraceEntry] = field(default_factory=list)
    final_store: MemoryStore | None = None
    granularity: str = "turn"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def final_memory_count(self) -> int:
        return len(self.final_store) if self.final_store is not None else 0

    def snapshot_at(self, session_id: str, turn_index: int) -> MemorySnapshot:
        """Memory state right after the utterance at ``(session_id, turn_index)`` was processed.

        In session-batched traces this is the state after the session's call.
        """
        prior: MemorySnapshot | None = None
        seen = False
        for e in self.entries:
            if e.session_id == session_id:
                seen = True
                if e.turn_index == turn_index or (e.turn_index > turn_index and self.granularity == "session"):
                    return e.snapshot
                if e.turn_index > turn_index:
                    break
            elif seen:
                break
            prior = e.snapshot
        return prior if prior is not None else MemoryStore(self.patient_id).snapshot()

    def rebuild_snapshots(self, session_dates: dict[str, str]) -> None:
        """Re-apply the logged deltas to restore per-turn snapshots after loading from disk."""
        store = MemoryStore(self.patient_id)
        for e in self.entries:
            report = store.apply_delta(e.delta, e.session_id, session_dates[e.session_id])
            if report.to_dict() != e.report.to_dict():
                raise ValueError(f"trace for {self.patient_id} does not replay at {e.session_id}/{e.turn_index}")
            e.snapshot = store.snapshot()
        self.final_store = store

    def changed_in_session(self, session_id: str) -> list[MemoryRecord]:
        return [m for e in self.entries if e.session_id == session_id for m in e.report.changed]


def replay_transcript(
    gateway: Gateway, transcript: HybridTranscript, granularity: str = "turn"
) -> ReplayTrace:
    """Run extraction over every patient turn of every session in order.

    ``granularity="session"`` batches each session into one call at its last
    patient turn.
    """
    if granularity not in ("turn", "session"):
        raise ValueError(f"unknown granularity {granularity!r}")
    store = MemoryStore(transcript.patient_id)
    trace = ReplayTrace(transcript.patient_id, granularity=granularity)
    for session in transcript.sessions:
        indices = session.patient_turn_indices
        if granularity == "session" and indices:
            indices = [indices[-1]]
        for ti in indices:
            delta, report = extract_turn(gateway, store, session, ti, transcript.patient_id)
            trace.entries.append(
                TraceEntry(
                    transcript.patient_id,
                    session.session_id,
                    session.kind,
                    ti,
                    delta,
                    report,
                    store.snapshot(),
                    len(store),
                )
            )
    trace.final_store = store
    return trace


def replay_corpus(
    gateway: Gateway, transcripts: list[HybridTranscript], workers: int = 1, granularity: str = "turn"
) -> dict[str, ReplayTrace | ExtractionError]:
    """Replay every patient; a failing patient does not stop the others."""

    def run(t: HybridTranscript) -> ReplayTrace | ExtractionError:
        try:
            return replay_transcript(gateway, t, granularity)
        except ExtractionError as exc:
            logger.error("%s", exc)
            return exc

    if workers <= 1:
        results = [run(t) for t in transcripts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, transcripts))
    return {t.patient_id: r for t, r in zip(transcripts, results)}


def write_trace(path: str | Path, traces: Iterable[ReplayTrace]) -> None:
    """Trace JSONL: one line per processed patient turn, then one final-state line per patient."""
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for e in trace.entries:
                fh.write(json.dumps({"type": "turn", **e.to_dict()}, ensure_ascii=False, sort_keys=True) + "\n")
            store = trace.final_store or MemoryStore(trace.patient_id)
            final = {
                "type": "final",
                "patient_id": trace.patient_id,
                "granularity": trace.granularity,
                "store": json.loads(store.to_json()),
            }
            fh.write(json.dumps(final, ensure_ascii=False, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> dict[str, ReplayTrace]:
    """Load traces written by :func:`write_trace` (without per-turn snapshots)."""
    traces: dict[str, ReplayTrace] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            pid = d["patient_id"]
            trace = traces.setdefault(pid, ReplayTrace(pid))
            if d["type"] == "turn":
                trace.entries.append(TraceEntry.from_dict(d))
            else:
                trace.final_store = MemoryStore.from_json(json.dumps(d["store"]))
                trace.granularity = d.get("granularity", "turn")
    return traces
