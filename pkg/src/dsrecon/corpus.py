"""Transcript, scenario and ground-truth records plus their file formats.

Transcripts are JSONL, one session per line::

    {"patient_id", "session_id", "kind": "real"|"synthetic", "session_date",
     "turns": [{"speaker", "text", "timestamp"}], "gt_events": [...],
     "scenario_id": optional}

A path may name a single file holding every patient or a directory with one
``<patient_id>.jsonl`` per patient. Scenarios are a JSON array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Any, Iterable

from .reconciliation import SEVERITIES, FhirResourceRef

SPEAKERS = ("patient", "coach")


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    timestamp: datetime
    turn_index: int = 0

    def __post_init__(self) -> None:
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}")
        if not self.text.strip():
            raise ValueError("turn text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"speaker": self.speaker, "text": self.text, "timestamp": self.timestamp.isoformat()}


@dataclass(frozen=True)
class GroundTruthEvent:
    event_id: str
    session_id: str
    turn_index: int
    utterance: str
    memory_content: str
    category: str = "health"

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "utterance": self.utterance,
            "memory_content": self.memory_content,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GroundTruthEvent:
        return cls(
            d["event_id"],
            d["session_id"],
            int(d["turn_index"]),
            d["utterance"],
            d["memory_content"],
            d.get("category", "health"),
        )


@dataclass(frozen=True)
class Session:
    session_id: str
    session_date: date
    turns: tuple[Turn, ...]
    kind: str = "real"
    patient_id: str = ""
    gt_events: tuple[GroundTruthEvent, ...] = ()
    scenario_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("real", "synthetic"):
            raise ValueError(f"unknown session kind {self.kind!r}")
        for a, b in zip(self.turns, self.turns[1:]):
            if b.timestamp < a.timestamp:
                raise ValueError(f"{self.session_id}: turn timestamps decrease")
        for ev in self.gt_events:
            if not 0 <= ev.turn_index < len(self.turns) or self.turns[ev.turn_index].speaker != "patient":
                raise ValueError(f"{ev.event_id}: turn_index does not point at a patient turn")

    @property
    def patient_turn_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.speaker == "patient"]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "patient_id": self.patient_id,
            "session_id": self.session_id,
            "kind": self.kind,
            "session_date": self.session_date.isoformat(),
            "turns": [t.to_dict() for t in self.turns],
            "gt_events": [e.to_dict() for e in self.gt_events],
        }
        if self.scenario_id is not None:
            d["scenario_id"] = self.scenario_id
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Session:
        turns = tuple(
            Turn(t["speaker"], t["text"], datetime.fromisoformat(t["timestamp"]), i)
            for i, t in enumerate(d["turns"])
        )
        return cls(
            session_id=d["session_id"],
            session_date=date.fromisoformat(d["session_date"]),
            turns=turns,
            kind=d.get("kind", "real"),
            patient_id=d.get("patient_id", ""),
            gt_events=tuple(GroundTruthEvent.from_dict(e) for e in d.get("gt_events", [])),
            scenario_id=d.get("scenario_id"),
        )

    def transcript_text(self) -> str:
        return "\n".join(f"[{i}] {t.speaker}: {t.text}" for i, t in enumerate(self.turns))


def make_turns(pairs: Iterable[tuple[str, str]], start: datetime, step_minutes: int = 2) -> tuple[Turn, ...]:
    """Turns from ``(speaker, text)`` pairs at fixed spacing from ``start``."""
    return tuple(
        Turn(s, t, start + timedelta(minutes=step_minutes * i), i) for i, (s, t) in enumerate(pairs)
    )


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    patient_id: str
    description: str
    expected_type: str
    severity_gt: str
    safety_critical: bool
    expected_refs: tuple[FhirResourceRef, ...]
    session_id: str = ""

    def __post_init__(self) -> None:
        if self.expected_type not in ("contradiction", "gap_patient"):
            raise ValueError(f"invalid expected_type {self.expected_type!r}")
        if self.severity_gt not in SEVERITIES:
            raise ValueError(f"invalid severity_gt {self.severity_gt!r}")
        if not self.expected_refs:
            raise ValueError(f"{self.scenario_id}: expected_refs must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "patient_id": self.patient_id,
            "description": self.description,
            "expected_type": self.expected_type,
            "severity_gt": self.severity_gt,
            "safety_critical": self.safety_critical,
            "expected_refs": [r.to_dict() for r in self.expected_refs],
            "session_id": self.session_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Scenario:
        return cls(
            scenario_id=d["scenario_id"],
            patient_id=d["patient_id"],
            description=d.get("description", ""),
            expected_type=d["expected_type"],
            severity_gt=d["severity_gt"],
            safety_critical=bool(d["safety_critical"]),
            expected_refs=tuple(FhirResourceRef.from_dict(r) for r in d["expected_refs"]),
            session_id=d.get("session_id", ""),
        )


@dataclass
class HybridTranscript:
    patient_id: str
    sessions: list[Session] = field(default_factory=list)

    def __post_init__(self) -> None:
        for a, b in zip(self.sessions, self.sessions[1:]):
            if b.session_date < a.session_date:
                raise ValueError(f"{self.patient_id}: sessions are not chronological")

    @property
    def scenario_index(self) -> dict[str, str]:
        return {s.session_id: s.scenario_id for s in self.sessions if s.scenario_id}

    @property
    def patient_turns(self) -> int:
        return sum(len(s.patient_turn_indices) for s in self.sessions)

    @property
    def gt_events(self) -> list[GroundTruthEvent]:
        return [e for s in self.sessions for e in s.gt_events]

    def session(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------


def write_transcripts(path: str | Path, transcripts: Iterable[HybridTranscript]) -> None:
    path = Path(path)
    transcripts = list(transcripts)
    if path.suffix != ".jsonl":
        path.mkdir(parents=True, exist_ok=True)
        for t in transcripts:
            _write_sessions(path / f"{t.patient_id}.jsonl", t)
        return
    with path.open("w", encoding="utf-8") as fh:
        for t in transcripts:
            for s in t.sessions:
                fh.write(json.dumps(replace(s, patient_id=t.patient_id).to_dict(), ensure_ascii=False) + "\n")


def _write_sessions(path: Path, t: HybridTranscript) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for s in t.sessions:
            fh.write(json.dumps(replace(s, patient_id=t.patient_id).to_dict(), ensure_ascii=False) + "\n")


def read_transcripts(path: str | Path) -> list[HybridTranscript]:
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    by_patient: dict[str, list[Session]] = {}
    for f in files:
        with f.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    s = Session.from_dict(json.loads(line))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{f}:{lineno}: {exc}") from exc
                pid = s.patient_id or f.stem
                by_patient.setdefault(pid, []).append(replace(s, patient_id=pid))
    return [HybridTranscript(pid, sessions) for pid, sessions in sorted(by_patient.items())]


def write_scenarios(path: str | Path, scenarios: Iterable[Scenario]) -> None:
    Path(path).write_text(
        json.dumps([s.to_dict() for s in scenarios], indent=1, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def read_scenarios(path: str | Path) -> list[Scenario]:
    return [Scenario.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
