"""Response schemas for every structured LLM call, keyed by schema id."""

from __future__ import annotations

import json
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, conint, confloat

Category = Literal["preference", "health", "lifestyle", "medication", "fact"]


class MemoryInsertModel(BaseModel):
    content: str
    category: Category


class MemoryUpdateModel(BaseModel):
    memory_id: str
    new_content: str
    category: Category


class MemoryDeleteModel(BaseModel):
    memory_id: str
    justification: str = ""


class MemoryDeltaModel(BaseModel):
    inserts: List[MemoryInsertModel]
    updates: List[MemoryUpdateModel]
    deletes: List[MemoryDeleteModel]


class FhirResourceRefModel(BaseModel):
    resource_type: str
    code_system: str
    code_value: str
    display: str = ""


class ReconciliationResultModel(BaseModel):
    contradiction_type: Literal["agreement", "contradiction", "gap_patient", "no_fhir"]
    confidence: confloat(ge=0.0, le=1.0)
    justification: str
    clinical_severity: Literal["low", "medium", "high"]
    fhir_resources_considered: List[FhirResourceRefModel]


class JudgeEventModel(BaseModel):
    verdict: Literal["MATCH", "PARTIAL", "NO_MATCH"]
    content_fidelity: Optional[conint(ge=1, le=5)] = None
    reasoning: str = ""


class ScoredDimension(BaseModel):
    score: conint(ge=1, le=5)
    reasoning: str = ""


class JudgeTranscriptModel(BaseModel):
    faithfulness: ScoredDimension
    deduplication: ScoredDimension
    overall_notes: str = ""


class DialogueTurnModel(BaseModel):
    speaker: Literal["coach", "patient"]
    text: str = Field(min_length=1)


class ScenarioSessionModel(BaseModel):
    turns: List[DialogueTurnModel]


class GtEventModel(BaseModel):
    turn_index: conint(ge=0)
    utterance: str
    memory_content: str = Field(min_length=1)
    category: Optional[Category] = None


class GtEventsModel(BaseModel):
    events: List[GtEventModel]


SCHEMAS: dict[str, type[BaseModel]] = {
    "memory_delta": MemoryDeltaModel,
    "reconciliation_result": ReconciliationResultModel,
    "judge_event": JudgeEventModel,
    "judge_transcript": JudgeTranscriptModel,
    "scenario_session": ScenarioSessionModel,
    "gt_events": GtEventsModel,
}

EMPTY_DELTA = {"inserts": [], "updates": [], "deletes": []}


class SchemaViolation(ValueError):
    """A response did not parse or validate against its schema."""

    def __init__(self, schema_id: str, message: str, raw: str, fields: list[str] | None = None):
        super().__init__(f"{schema_id}: {message}")
        self.schema_id = schema_id
        self.raw = raw
        self.fields = fields or []


def _strip_fences(raw: str) -> str:
    text = raw.strip()
    if text.startswith("```"):
        text = text.split("\n", 1)[1] if "\n" in text else ""
        if text.rstrip().endswith("```"):
            text = text.rstrip()[:-3]
    return text


def validate(schema_id: str, raw: str | dict[str, Any]) -> dict[str, Any]:
    """Parse ``raw`` and validate it against the schema named ``schema_id``."""
    if schema_id not in SCHEMAS:
        raise KeyError(f"unknown schema id {schema_id!r}")
    raw_text = raw if isinstance(raw, str) else json.dumps(raw)
    try:
        value = json.loads(_strip_fences(raw_text)) if isinstance(raw, str) else raw
    except json.JSONDecodeError as exc:
        raise SchemaViolation(schema_id, f"invalid JSON: {exc}", raw_text) from exc
    try:
        model = SCHEMAS[schema_id].model_validate(value)
    except ValidationError as exc:
        fields = [".".join(str(p) for p in err["loc"]) for err in exc.errors()]
        raise SchemaViolation(
            schema_id, f"schema violation in field(s) {', '.join(fields)}", raw_text, fields
        ) from exc
    return model.model_dump()


def json_schema(schema_id: str) -> dict[str, Any]:
    return SCHEMAS[schema_id].model_json_schema()
