"""Reconciliation of narrative memories against the curated clinical record."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any

from .fhir_ingest import ClinicalStream, CuratedSummary, lookup
from .llm_gateway import ChatRequest, Gateway, GatewayError
from .narrative_memory import MemoryRecord
from .prompts import RECONCILIATION_TEMPLATE, fill

logger = logging.getLogger(__name__)

CONTRADICTION_TYPES = ("agreement", "contradiction", "gap_patient", "no_fhir")
DETECTED_TYPES = frozenset({"contradiction", "gap_patient"})
SEVERITIES = ("low", "medium", "high")
SEVERITY_RANK = {s: i for i, s in enumerate(SEVERITIES)}


@dataclass(frozen=True)
class FhirResourceRef:
    resource_type: str
    code_system: str
    code_value: str
    display: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.resource_type, self.code_system, self.code_value)

    def to_dict(self) -> dict[str, str]:
        return {
            "resource_type": self.resource_type,
            "code_system": self.code_system,
            "code_value": self.code_value,
            "display": self.display,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FhirResourceRef:
        return cls(d["resource_type"], d["code_system"], d["code_value"], d.get("display", ""))


@dataclass(frozen=True)
class ReconciliationResult:
    contradiction_type: str
    confidence: float
    justification: str
    clinical_severity: str
    fhir_resources_considered: tuple[FhirResourceRef, ...]
    memory_id: str = ""
    session_id: str = ""
    patient_id: str = ""
    memory_content: str = ""
    cited_unknown: tuple[FhirResourceRef, ...] = ()

    def __post_init__(self) -> None:
        if self.contradiction_type not in CONTRADICTION_TYPES:
            raise ValueError(f"invalid contradiction_type {self.contradiction_type!r}")
        if self.clinical_severity not in SEVERITIES:
            raise ValueError(f"invalid clinical_severity {self.clinical_severity!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def detected(self) -> bool:
        return self.contradiction_type in DETECTED_TYPES

    def to_dict(self) -> dict[str, Any]:
        return {
            "patient_id": self.patient_id,
            "session_id": self.session_id,
            "memory_id": self.memory_id,
            "memory_content": self.memory_content,
            "contradiction_type": self.contradiction_type,
            "detected": self.detected,
            "confidence": self.confidence,
            "clinical_severity": self.clinical_severity,
            "justification": self.justification,
            "fhir_resources_considered": [r.to_dict() for r in self.fhir_resources_considered],
            "cited_unknown": [r.to_dict() for r in self.cited_unknown],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ReconciliationResult:
        return cls(
            contradiction_type=d["contradiction_type"],
            confidence=float(d["confidence"]),
            justification=d["justification"],
            clinical_severity=d["clinical_severity"],
            fhir_resources_considered=tuple(
                FhirResourceRef.from_dict(r) for r in d["fhir_resources_considered"]
            ),
            memory_id=d.get("memory_id", ""),
            session_id=d.get("session_id", ""),
            patient_id=d.get("patient_id", ""),
            memory_content=d.get("memory_content", ""),
            cited_unknown=tuple(FhirResourceRef.from_dict(r) for r in d.get("cited_unknown", [])),
        )


@dataclass(frozen=True)
class ReconciliationFailure:
    memory_id: str
    session_id: str
    error: str
    raw: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"memory_id": self.memory_id, "session_id": self.session_id, "error": self.error}


class ReconciliationError(GatewayError):
    def __init__(self, memory_id: str, cause: Exception) -> None:
        super().__init__(f"reconciliation failed for {memory_id}: {cause}", getattr(cause, "raw", None))
        self.memory_id = memory_id


def build_recon_prompt(memory: MemoryRecord, summary: CuratedSummary | str) -> ChatRequest:
    text = summary if isinstance(summary, str) else summary.text
    if not text.strip():
        raise ValueError("clinical summary is empty")
    user = fill(
        RECONCILIATION_TEMPLATE,
        content=memory.content,
        category=memory.category,
        clinical_summary=text.rstrip("\n"),
    )
    return ChatRequest(system_text="", user_text=user, schema_id="reconciliation_result")


def parse_result(
    value: dict[str, Any],
    memory: MemoryRecord,
    resolvable: ClinicalStream | CuratedSummary,
    session_id: str = "",
    patient_id: str = "",
) -> ReconciliationResult:
    """Turn a validated response into a result, quarantining unresolvable citations."""
    pool = resolvable.included if isinstance(resolvable, CuratedSummary) else resolvable
    refs = tuple(FhirResourceRef.from_dict(r) for r in value["fhir_resources_considered"])
    unknown = tuple(r for r in refs if lookup(pool, r) is None)
    return ReconciliationResult(
        contradiction_type=value["contradiction_type"],
        confidence=float(value["confidence"]),
        justification=value["justification"],
        clinical_severity=value["clinical_severity"],
        fhir_resources_considered=refs,
        memory_id=memory.memory_id,
        session_id=session_id or memory.source_session,
        patient_id=patient_id,
        memory_content=memory.content,
        cited_unknown=unknown,
    )


def reconcile(
    gateway: Gateway,
    memory: MemoryRecord,
    summary: CuratedSummary,
    session_id: str = "",
    patient_id: str = "",
) -> ReconciliationResult:
    """Classify one changed memory against the patient's curated summary.

    Citations are checked against the resources actually shown to the model;
    the ones that do not resolve are kept but listed in ``cited_unknown``.
    """
    request = build_recon_prompt(memory, summary)
    try:
        value = gateway.complete_structured(request)
    except GatewayError as exc:
        raise ReconciliationError(memory.memory_id, exc) from exc
    return parse_result(value, memory, summary, session_id, patient_id)


def reconcile_batch(
    gateway: Gateway,
    memories: list[MemoryRecord],
    summary: CuratedSummary,
    session_id: str = "",
    patient_id: str = "",
) -> list[ReconciliationResult | ReconciliationFailure]:
    out: list[ReconciliationResult | ReconciliationFailure] = []
    for m in memories:
        try:
            out.append(reconcile(gateway, m, summary, session_id, patient_id))
        except ReconciliationError as exc:
            logger.warning("%s", exc)
            out.append(ReconciliationFailure(m.memory_id, session_id or m.source_session, str(exc), exc.raw))
    return out


def write_results(path, results: list[ReconciliationResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_results(path) -> list[ReconciliationResult]:
    with open(path, encoding="utf-8") as fh:
        return [ReconciliationResult.from_dict(json.loads(line)) for line in fh if line.strip()]
