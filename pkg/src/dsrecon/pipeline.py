"""End-to-end orchestration of the three evaluation dimensions.

Dimension 1 replays each hybrid transcript through extraction and judges the
result. Dimension 2 reconciles ground-truth memories of scenario sessions in
isolation. Dimension 3 reconciles the memories that extraction actually
changed, taken from the Dimension 1 trace.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

from .corpus import GroundTruthEvent, HybridTranscript, Scenario, Session
from .evaluation import (
    EvalReport,
    JudgeVerdict,
    build_report,
    dim1_report,
    judge_event,
    judge_transcript,
    score_all,
)
from .extraction import ExtractionError, ReplayTrace, replay_corpus
from .fhir_ingest import DEFAULT_BUDGET, CuratedSummary, curate, parse_bundle
from .llm_gateway import Gateway
from .narrative_memory import MemoryRecord
from .reconciliation import ReconciliationFailure, ReconciliationResult, reconcile_batch

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def fan_out(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Map over ``items`` with a thread pool, preserving input order."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# Clinical summaries and scenario binding
# --------------------------------------------------------------------------


def load_bundles(path: str | Path) -> dict[str, dict]:
    """``<patient_id>.json`` bundle files from a directory, keyed by file stem."""
    out = {}
    for f in sorted(Path(path).glob("*.json")):
        out[f.stem] = json.loads(f.read_text(encoding="utf-8"))
    return out


def prepare_summaries(
    bundles: Mapping[str, dict], budget: tuple[int, int] = DEFAULT_BUDGET
) -> dict[str, CuratedSummary]:
    return {pid: curate(parse_bundle(b, pid), budget) for pid, b in sorted(bundles.items())}


def bind_scenarios(scenarios: Iterable[Scenario], transcripts: Iterable[HybridTranscript]) -> list[Scenario]:
    """Fill each scenario's ``session_id`` from the transcripts and check the pairing is one-to-one."""
    session_of: dict[str, str] = {}
    for t in transcripts:
        for sid, scid in t.scenario_index.items():
            if scid in session_of:
                raise ValueError(f"scenario {scid} appears in two sessions")
            session_of[scid] = sid
    out = []
    for s in scenarios:
        sid = session_of.get(s.scenario_id, s.session_id)
        if not sid:
            raise ValueError(f"scenario {s.scenario_id} has no session")
        if s.session_id and s.session_id != sid:
            raise ValueError(f"scenario {s.scenario_id} names session {s.session_id} but appears in {sid}")
        out.append(replace(s, session_id=sid))
    return out


# --------------------------------------------------------------------------
# Dimension 1
# --------------------------------------------------------------------------


@dataclass
class Dim1Run:
    traces: dict[str, ReplayTrace]
    verdicts: list[JudgeVerdict]
    transcript_scores: dict[str, dict[str, int]]
    failures: dict[str, str] = field(default_factory=dict)

    def report(self, transcripts: Sequence[HybridTranscript]) -> dict[str, Any]:
        turns = {t.patient_id: t.patient_turns for t in transcripts if t.patient_id in self.traces}
        finals = {pid: tr.final_memory_count for pid, tr in self.traces.items()}
        return dim1_report(self.verdicts, self.transcript_scores, turns, finals)


def judge_patient(
    gateway: Gateway, transcript: HybridTranscript, trace: ReplayTrace
) -> tuple[list[JudgeVerdict], dict[str, int]]:
    verdicts = [
        judge_event(gateway, ev, trace.snapshot_at(s.session_id, ev.turn_index), transcript.patient_id)
        for s in transcript.sessions
        for ev in s.gt_events
    ]
    return verdicts, judge_transcript(gateway, transcript, trace.final_store)


def run_dim1(
    extraction_gateway: Gateway,
    judge_gateway: Gateway,
    transcripts: Sequence[HybridTranscript],
    workers: int = 1,
    granularity: str = "turn",
) -> Dim1Run:
    replayed = replay_corpus(extraction_gateway, list(transcripts), workers, granularity)
    traces = {pid: r for pid, r in replayed.items() if isinstance(r, ReplayTrace)}
    failures = {pid: str(r) for pid, r in replayed.items() if isinstance(r, ExtractionError)}
    ok = [t for t in transcripts if t.patient_id in traces]
    judged = fan_out(lambda t: judge_patient(judge_gateway, t, traces[t.patient_id]), ok, workers)
    verdicts = [v for vs, _ in judged for v in vs]
    scores = {t.patient_id: sc for t, (_, sc) in zip(ok, judged)}
    return Dim1Run(traces, verdicts, scores, failures)


# --------------------------------------------------------------------------
# Dimensions 2 and 3
# --------------------------------------------------------------------------

ReconOutput = list[ReconciliationResult | ReconciliationFailure]


def gt_memory(event: GroundTruthEvent, session: Session) -> MemoryRecord:
    when = session.session_date.isoformat()
    return MemoryRecord(event.event_id, event.memory_content, event.category, when, when, session.session_id)


def _split(out: ReconOutput) -> tuple[list[ReconciliationResult], list[ReconciliationFailure]]:
    ok = [r for r in out if isinstance(r, ReconciliationResult)]
    bad = [r for r in out if isinstance(r, ReconciliationFailure)]
    return ok, bad


def reconcile_isolated(
    gateway: Gateway,
    transcripts: Sequence[HybridTranscript],
    summaries: Mapping[str, CuratedSummary],
    workers: int = 1,
) -> tuple[list[ReconciliationResult], list[ReconciliationFailure]]:
    """One result per ground-truth memory of every synthetic session."""

    def run(t: HybridTranscript) -> ReconOutput:
        out: ReconOutput = []
        for s in t.sessions:
            if s.kind == "synthetic" and s.gt_events:
                memories = [gt_memory(ev, s) for ev in s.gt_events]
                out += reconcile_batch(gateway, memories, summaries[t.patient_id], s.session_id, t.patient_id)
        return out

    return _split([r for chunk in fan_out(run, list(transcripts), workers) for r in chunk])


def reconcile_pipeline(
    gateway: Gateway,
    transcripts: Sequence[HybridTranscript],
    traces: Mapping[str, ReplayTrace],
    summaries: Mapping[str, CuratedSummary],
    workers: int = 1,
) -> tuple[list[ReconciliationResult], list[ReconciliationFailure]]:
    """Reconcile each turn's changed memories exactly as extraction left them."""

    def run(t: HybridTranscript) -> ReconOutput:
        out: ReconOutput = []
        for e in traces[t.patient_id].entries:
            if e.report.changed:
                out += reconcile_batch(gateway, list(e.report.changed), summaries[t.patient_id], e.session_id, t.patient_id)
        return out

    ok = [t for t in transcripts if t.patient_id in traces]
    return _split([r for chunk in fan_out(run, ok, workers) for r in chunk])


def real_session_ids(transcripts: Iterable[HybridTranscript]) -> set[str]:
    return {s.session_id for t in transcripts for s in t.sessions if s.kind == "real"}


def evaluate(
    dim1: dict[str, Any],
    scenarios: Sequence[Scenario],
    transcripts: Sequence[HybridTranscript],
    isolated: Sequence[ReconciliationResult],
    coupled: Sequence[ReconciliationResult],
    seed: int = 0,
    iterations: int = 10_000,
    bootstrap_unit: str = "scenario",
) -> EvalReport:
    scenarios = bind_scenarios(scenarios, transcripts)
    real = real_session_ids(transcripts)
    return build_report(
        dim1,
        scenarios,
        score_all(scenarios, isolated),
        score_all(scenarios, coupled),
        [r for r in coupled if r.session_id in real],
        seed,
        iterations,
        bootstrap_unit,
    )


@dataclass
class FullRun:
    dim1: Dim1Run
    isolated: list[ReconciliationResult]
    coupled: list[ReconciliationResult]
    failures: list[ReconciliationFailure]
    report: EvalReport


def run_all(
    extraction_gateway: Gateway,
    reconciliation_gateway: Gateway,
    judge_gateway: Gateway,
    transcripts: Sequence[HybridTranscript],
    scenarios: Sequence[Scenario],
    summaries: Mapping[str, CuratedSummary],
    workers: int = 1,
    seed: int = 0,
    iterations: int = 10_000,
    bootstrap_unit: str = "scenario",
) -> FullRun:
    d1 = run_dim1(extraction_gateway, judge_gateway, transcripts, workers)
    iso, f_iso = reconcile_isolated(reconciliation_gateway, transcripts, summaries, workers)
    cpl, f_cpl = reconcile_pipeline(reconciliation_gateway, transcripts, d1.traces, summaries, workers)
    report = evaluate(d1.report(transcripts), scenarios, transcripts, iso, cpl, seed, iterations, bootstrap_unit)
    return FullRun(d1, iso, cpl, f_iso + f_cpl, report)
