"""Corpus construction: session segmentation, bundle matching, hybrid transcripts.

Synthetic sessions come from two separate gateway calls. The dialogue call
sees the scenario and the clinical summary; the ground-truth call sees only
the finished transcript. :func:`gt_isolation_hits` checks the audit log for
leaks between the two.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from typing import Any, Iterable, Sequence

from .corpus import GroundTruthEvent, HybridTranscript, Scenario, Session, Turn
from .fhir_ingest import CuratedSummary, parse_bundle
from .llm_gateway import ChatRequest, Gateway
from .prompts import GT_EXTRACTION_PROMPT, SCENARIO_DIALOGUE_PROMPT, fill

logger = logging.getLogger(__name__)

SESSION_GAP = timedelta(hours=4)
SESSION_MAX_SPAN = timedelta(hours=48)

SCORE_WEIGHTS = {"conditions": 0.4, "medications": 0.4, "gender": 0.1, "age": 0.1}
AGE_SCALE = 50.0


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    speaker: str
    text: str
    timestamp: datetime

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Message:
        return cls(d["speaker"], d["text"], datetime.fromisoformat(d["timestamp"]))


def segment_messages(
    messages: Sequence[Message], patient_id: str = "p", id_prefix: str | None = None
) -> list[Session]:
    """Split a sorted message log into sessions.

    A message opens a new session when it arrives more than 4 hours after
    the previous message, or when adding it would stretch the current
    session beyond 48 hours from its first message. The gap rule is
    checked first.
    """
    for a, b in zip(messages, messages[1:]):
        if b.timestamp < a.timestamp:
            raise ValueError("messages must be sorted by timestamp")
    groups: list[list[Message]] = []
    for m in messages:
        if groups:
            cur = groups[-1]
            if m.timestamp - cur[-1].timestamp <= SESSION_GAP and m.timestamp - cur[0].timestamp <= SESSION_MAX_SPAN:
                cur.append(m)
                continue
        groups.append([m])
    prefix = id_prefix or f"{patient_id}-r"
    return [
        Session(
            session_id=f"{prefix}{k:03d}",
            session_date=g[0].timestamp.date(),
            turns=tuple(Turn(m.speaker, m.text, m.timestamp, i) for i, m in enumerate(g)),
            kind="real",
            patient_id=patient_id,
        )
        for k, g in enumerate(groups)
    ]


def session_boundaries(sessions: Iterable[Session]) -> list[int]:
    """Start offsets of each session in the concatenated message stream."""
    out, pos = [], 0
    for s in sessions:
        out.append(pos)
        pos += len(s.turns)
    return out


# --------------------------------------------------------------------------
# Bundle candidate scoring
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PatientProfile:
    age: float
    gender: str
    condition_codes: frozenset[str]
    medication_codes: frozenset[str]


@dataclass(frozen=True)
class BundleCandidate:
    patient_id: str
    age: float
    gender: str
    condition_codes: frozenset[str]
    medication_codes: frozenset[str]

    @classmethod
    def from_bundle(cls, bundle: dict, reference_date: date, patient_id: str | None = None) -> BundleCandidate:
        stream = parse_bundle(bundle, patient_id)
        gender, age = "", 0.0
        for entry in bundle.get("entry") or []:
            res = entry.get("resource") or {}
            if res.get("resourceType") == "Patient":
                gender = res.get("gender", "")
                if res.get("birthDate"):
                    born = date.fromisoformat(res["birthDate"][:10])
                    age = (reference_date - born).days / 365.25
                break
        return cls(
            stream.patient_id,
            age,
            gender,
            frozenset(r.code.code_value for r in stream.resources if r.resource_type == "Condition"),
            frozenset(r.code.code_value for r in stream.resources if r.resource_type == "MedicationRequest"),
        )


@dataclass(frozen=True)
class ScoredCandidate:
    patient_id: str
    score: float
    components: dict[str, float] = field(compare=False)
    weights: dict[str, float] = field(default_factory=lambda: dict(SCORE_WEIGHTS), compare=False)


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def score_bundle_candidates(
    profile: PatientProfile, candidates: Sequence[BundleCandidate]
) -> list[ScoredCandidate]:
    """Rank candidate bundles for a patient, best first (ties by patient id)."""
    if not candidates:
        raise ValueError("at least one candidate is required")
    scored = []
    for c in candidates:
        comp = {
            "conditions": jaccard(profile.condition_codes, c.condition_codes),
            "medications": jaccard(profile.medication_codes, c.medication_codes),
            "gender": 1.0 if profile.gender and profile.gender == c.gender else 0.0,
            "age": min(1.0, max(0.0, 1.0 - abs(profile.age - c.age) / AGE_SCALE)),
        }
        score = sum(SCORE_WEIGHTS[k] * v for k, v in comp.items())
        scored.append(ScoredCandidate(c.patient_id, score, comp))
    return sorted(scored, key=lambda s: (-s.score, s.patient_id))


# --------------------------------------------------------------------------
# Hybrid transcripts
# --------------------------------------------------------------------------


def midpoint_date(a: date, b: date) -> date:
    return a + timedelta(days=(b - a).days // 2)


def assign_synthetic_dates(real_sessions: Sequence[Session], anchors: Sequence[int]) -> list[date]:
    """Date for a synthetic session placed after real session ``anchors[i]``.

    The date is the midpoint between that session and the next real one;
    after the last real session it is the following day.
    """
    out = []
    for k in anchors:
        if not 0 <= k < len(real_sessions):
            raise IndexError(f"anchor {k} outside real session range")
        here = real_sessions[k].session_date
        nxt = real_sessions[k + 1].session_date if k + 1 < len(real_sessions) else here + timedelta(days=2)
        out.append(midpoint_date(here, nxt))
    return out


def interleave(real: Sequence[Session], synthetic: Sequence[Session]) -> list[Session]:
    """Merge by session date; on equal dates real sessions come first."""
    for s in synthetic:
        if s.session_date is None:
            raise ValueError(f"{s.session_id}: synthetic session has no date")
    keyed = [(s.session_date, 0, i, s) for i, s in enumerate(real)]
    keyed += [(s.session_date, 1, i, s) for i, s in enumerate(synthetic)]
    return [s for *_, s in sorted(keyed, key=lambda k: k[:3])]


def build_hybrid_transcript(
    patient_id: str, real: Sequence[Session], synthetic: Sequence[Session]
) -> HybridTranscript:
    sessions = [replace(s, patient_id=patient_id) for s in interleave(real, synthetic)]
    return HybridTranscript(patient_id, sessions)


# --------------------------------------------------------------------------
# Two-call scenario generation
# --------------------------------------------------------------------------


class GenerationError(ValueError):
    pass


def _scenario_block(s: Scenario) -> str:
    refs = "\n".join(f"- [{r.resource_type}] {r.display} [{r.code_system}:{r.code_value}]" for r in s.expected_refs)
    return (
        f"{s.description}\n"
        f"Expected discrepancy: {s.expected_type}; severity: {s.severity_gt}; "
        f"safety-critical: {'yes' if s.safety_critical else 'no'}\n"
        f"Clinical resources involved:\n{refs}"
    )


def build_dialogue_request(
    scenario: Scenario, summary: CuratedSummary | str, style_exemplars: Sequence[str]
) -> ChatRequest:
    text = summary if isinstance(summary, str) else summary.text
    user = fill(
        SCENARIO_DIALOGUE_PROMPT,
        scenario=_scenario_block(scenario),
        clinical_summary=text.rstrip("\n"),
        style_examples="\n".join(f"- {e}" for e in style_exemplars) or "(none)",
    )
    return ChatRequest(system_text="", user_text=user, schema_id="scenario_session", temperature=0.7)


def generate_scenario_session(
    gateway: Gateway,
    scenario: Scenario,
    summary: CuratedSummary | str,
    style_exemplars: Sequence[str],
    session_date: date,
    start_hour: int = 18,
) -> Session:
    """First call: write the scenario dialogue with access to the clinical record."""
    value = gateway.complete_structured(build_dialogue_request(scenario, summary, style_exemplars))
    pairs = [(t["speaker"], t["text"]) for t in value["turns"]]
    if not pairs:
        raise GenerationError(f"{scenario.scenario_id}: empty dialogue")
    for (a, _), (b, _) in zip(pairs, pairs[1:]):
        if a == b:
            raise GenerationError(f"{scenario.scenario_id}: speakers do not alternate")
    start = datetime.combine(session_date, datetime.min.time()) + timedelta(hours=start_hour)
    turns = tuple(Turn(s, t, start + timedelta(minutes=3 * i), i) for i, (s, t) in enumerate(pairs))
    return Session(
        session_id=scenario.session_id or f"{scenario.scenario_id}-s",
        session_date=session_date,
        turns=turns,
        kind="synthetic",
        patient_id=scenario.patient_id,
        scenario_id=scenario.scenario_id,
    )


def build_gt_request(session: Session) -> ChatRequest:
    user = fill(GT_EXTRACTION_PROMPT, transcript=session.transcript_text())
    return ChatRequest(system_text="", user_text=user, schema_id="gt_events")


def gt_extract(gateway: Gateway, session: Session) -> list[GroundTruthEvent]:
    """Second call: ground-truth memories from the transcript alone.

    Events pointing at a turn that is not a patient turn are dropped.
    """
    value = gateway.complete_structured(build_gt_request(session))
    events = []
    for ev in value["events"]:
        ti = ev["turn_index"]
        if not (0 <= ti < len(session.turns) and session.turns[ti].speaker == "patient"):
            logger.warning("%s: dropping GT event at invalid turn %s", session.session_id, ti)
            continue
        events.append(
            GroundTruthEvent(
                f"{session.session_id}-e{len(events)}",
                session.session_id,
                ti,
                ev["utterance"],
                ev["memory_content"],
                ev.get("category") or "health",
            )
        )
    return events


def annotate(gateway: Gateway, session: Session) -> Session:
    return replace(session, gt_events=tuple(gt_extract(gateway, session)))


def gt_isolation_hits(audit_entries: Iterable[dict[str, Any]], summaries: Iterable[str]) -> list[tuple[str, str]]:
    """(fingerprint, leaked line) for every summary line found in a gt_events request."""
    lines = {ln.strip() for s in summaries for ln in s.splitlines() if ln.strip()}
    hits = []
    for e in audit_entries:
        req = e["request"]
        if req["schema_id"] != "gt_events":
            continue
        body = req["system_text"] + "\n" + req["user_text"]
        hits.extend((e["fingerprint"], ln) for ln in sorted(lines) if ln in body)
    return hits
