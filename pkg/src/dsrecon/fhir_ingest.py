"""FHIR R4 bundle parsing and clinical-summary curation.

The clinical stream is a read-only list of :class:`ClinicalResource` built from
one patient's bundle. :func:`curate` selects what goes into the prompt-sized
summary and :func:`render_summary` writes it with inline ``[SYSTEM:CODE]`` tags
so the reconciliation model can cite resources that :func:`lookup` resolves.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Iterable

logger = logging.getLogger(__name__)

RESOURCE_TYPES = (
    "Condition",
    "MedicationRequest",
    "AllergyIntolerance",
    "Immunization",
    "CarePlan",
    "Observation",
    "Procedure",
    "Encounter",
)

CODE_SYSTEMS = {
    "http://snomed.info/sct": "SNOMED-CT",
    "http://www.nlm.nih.gov/research/umls/rxnorm": "RxNorm",
    "http://loinc.org": "LOINC",
    "http://hl7.org/fhir/sid/cvx": "CVX",
    "http://hl7.org/fhir/sid/icd-10-cm": "ICD-10-CM",
}

DEFAULT_BUDGET = (1100, 1600)
CHARS_PER_TOKEN = 4

# Observations never trimmed for budget (vitals and the common metabolic panel).
KEY_OBSERVATION_CODES = frozenset(
    {
        "39156-5",  # BMI
        "85354-9",  # blood pressure panel
        "4548-4",  # HbA1c
        "29463-7",  # body weight
        "8302-2",  # body height
        "2339-0",  # glucose
        "2093-3",  # total cholesterol
        "18262-6",  # LDL
        "2085-9",  # HDL
        "2571-8",  # triglycerides
    }
)

_SECTIONS = (
    ("CONDITIONS:", "Condition"),
    ("MEDICATIONS:", "MedicationRequest"),
    ("ALLERGIES:", "AllergyIntolerance"),
    ("IMMUNIZATIONS:", "Immunization"),
    ("CARE PLANS:", "CarePlan"),
    ("PROCEDURES:", "Procedure"),
    ("KEY OBSERVATIONS (most recent):", "Observation"),
)

_DATE_LABELS = {"Condition": "onset", "MedicationRequest": "authored"}

_TAG_RE = re.compile(r"\[([A-Za-z0-9-]+):([^\]\s]+)\]")


class BundleParseError(ValueError):
    """The bundle document is not a usable FHIR R4 Bundle."""

    def __init__(self, message: str, entry_index: int | None = None) -> None:
        where = f" (entry {entry_index})" if entry_index is not None else ""
        super().__init__(f"{message}{where}")
        self.entry_index = entry_index


@dataclass(frozen=True)
class CodeRef:
    code_system: str
    code_value: str
    display: str

    def __post_init__(self) -> None:
        if not self.code_system or not self.code_value:
            raise ValueError("code_system and code_value must be non-empty")
        if not self.display:
            raise ValueError("display must be non-empty")

    @property
    def tag(self) -> str:
        return f"[{self.code_system}:{self.code_value}]"


@dataclass(frozen=True)
class ClinicalResource:
    resource_type: str
    code: CodeRef
    value: str = ""
    status: str = ""
    temporal: date | None = None

    def __post_init__(self) -> None:
        if self.resource_type not in RESOURCE_TYPES:
            raise ValueError(f"unsupported resource type {self.resource_type!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        """Identity tuple used for citation matching."""
        return (self.resource_type, self.code.code_system, self.code.code_value)

    def to_dict(self) -> dict[str, Any]:
        return {
            "resource_type": self.resource_type,
            "code_system": self.code.code_system,
            "code_value": self.code.code_value,
            "display": self.code.display,
            "value": self.value,
            "status": self.status,
            "temporal": self.temporal.isoformat() if self.temporal else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ClinicalResource:
        return cls(
            resource_type=d["resource_type"],
            code=CodeRef(d["code_system"], d["code_value"], d["display"]),
            value=d.get("value", ""),
            status=d.get("status", ""),
            temporal=date.fromisoformat(d["temporal"]) if d.get("temporal") else None,
        )


@dataclass(frozen=True)
class ClinicalStream:
    patient_id: str
    resources: tuple[ClinicalResource, ...] = ()
    skipped: tuple[tuple[str, int], ...] = ()

    def count_by_type(self) -> dict[str, int]:
        return dict(Counter(r.resource_type for r in self.resources))


@dataclass(frozen=True)
class CuratedSummary:
    text: str
    included: tuple[ClinicalResource, ...]
    estimated_tokens: int
    budget: tuple[int, int] = DEFAULT_BUDGET
    below_floor: bool = False
    over_budget: bool = False
    trimmed: tuple[ClinicalResource, ...] = field(default=(), repr=False)

    def manifest(self) -> dict[str, Any]:
        """Sidecar JSON document describing the included resources."""
        return {
            "estimated_tokens": self.estimated_tokens,
            "token_estimator": f"ceil(chars/{CHARS_PER_TOKEN})",
            "budget": list(self.budget),
            "below_floor": self.below_floor,
            "over_budget": self.over_budget,
            "included": [r.to_dict() for r in self.included],
            "trimmed": [r.to_dict() for r in self.trimmed],
        }


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


def _system_name(url: str) -> str:
    if url in CODE_SYSTEMS:
        return CODE_SYSTEMS[url]
    tail = url.rstrip("/").rsplit("/", 1)[-1]
    return tail.upper() or url


def _first_coding(concept: dict | None) -> CodeRef | None:
    if not concept:
        return None
    for coding in concept.get("coding") or []:
        system, code = coding.get("system"), coding.get("code")
        if system and code:
            display = coding.get("display") or concept.get("text") or str(code)
            return CodeRef(_system_name(system), str(code), display)
    return None


def _status(concept_or_str: Any) -> str:
    if isinstance(concept_or_str, str):
        return concept_or_str
    coding = _first_coding(concept_or_str)
    return coding.code_value if coding else ""


def _parse_date(raw: str | None) -> date | None:
    if not raw:
        return None
    return date.fromisoformat(raw[:10])


def _quantity(q: dict) -> str:
    unit = q.get("unit") or q.get("code") or ""
    return f"{q.get('value')} {unit}".strip()


def _short_label(display: str) -> str:
    return display.split()[0] if display else "value"


def _observation_value(res: dict) -> str:
    if "valueQuantity" in res:
        return _quantity(res["valueQuantity"])
    if "valueCodeableConcept" in res:
        c = res["valueCodeableConcept"]
        coding = _first_coding(c)
        return c.get("text") or (coding.display if coding else "")
    if "valueString" in res:
        return str(res["valueString"])
    parts = []
    for comp in res.get("component") or []:
        coding = _first_coding(comp.get("code"))
        label = _short_label(coding.display) if coding else "value"
        if "valueQuantity" in comp:
            parts.append(f"{label}: {_quantity(comp['valueQuantity'])}")
    return " / ".join(parts)


_SEMANTIC_TAG_RE = re.compile(r"\s*\((disorder|finding|situation|procedure)\)$")


def _careplan_resources(res: dict, reasons: dict[str, str]) -> list[ClinicalResource]:
    reason = ""
    for addr in res.get("addresses") or []:
        ref = addr.get("reference", "")
        reason = reasons.get(ref) or reasons.get(ref.rsplit("/", 1)[-1]) or addr.get("display", "")
        if reason:
            break
    reason = _SEMANTIC_TAG_RE.sub("", reason)
    out = []
    for activity in res.get("activity") or []:
        code = _first_coding((activity.get("detail") or {}).get("code"))
        if code is None:
            continue
        display = f"{reason}: {code.display}" if reason else code.display
        out.append(
            ClinicalResource("CarePlan", CodeRef(code.code_system, code.code_value, display))
        )
    return out


def _parse_resource(res: dict) -> ClinicalResource | None:
    rtype = res["resourceType"]
    if rtype == "Condition":
        return _make(rtype, res.get("code"), _status(res.get("clinicalStatus")), res.get("onsetDateTime"))
    if rtype == "MedicationRequest":
        return _make(
            rtype, res.get("medicationCodeableConcept"), _status(res.get("status")), res.get("authoredOn")
        )
    if rtype == "AllergyIntolerance":
        return _make(
            rtype,
            res.get("code"),
            _status(res.get("clinicalStatus")),
            res.get("onsetDateTime") or res.get("recordedDate"),
        )
    if rtype == "Immunization":
        return _make(rtype, res.get("vaccineCode"), _status(res.get("status")), res.get("occurrenceDateTime"))
    if rtype == "Procedure":
        when = res.get("performedDateTime") or (res.get("performedPeriod") or {}).get("start")
        return _make(rtype, res.get("code"), _status(res.get("status")), when)
    if rtype == "Encounter":
        types = res.get("type") or [None]
        return _make(rtype, types[0], _status(res.get("status")), (res.get("period") or {}).get("start"))
    if rtype == "Observation":
        code = _first_coding(res.get("code"))
        if code is None:
            return None
        return ClinicalResource(
            rtype,
            code,
            value=_observation_value(res),
            temporal=_parse_date(res.get("effectiveDateTime")),
        )
    raise AssertionError(rtype)


def _make(rtype: str, concept: dict | None, status: str, when: str | None) -> ClinicalResource | None:
    code = _first_coding(concept)
    if code is None:
        return None
    return ClinicalResource(rtype, code, value=code.display, status=status, temporal=_parse_date(when))


def parse_bundle(bundle: dict, patient_id: str | None = None) -> ClinicalStream:
    """Build a :class:`ClinicalStream` from a FHIR R4 Bundle document.

    Unsupported resource types are skipped and counted in ``skipped``;
    supported resources without a usable coding are skipped with a warning.
    """
    if not isinstance(bundle, dict) or bundle.get("resourceType") != "Bundle":
        raise BundleParseError("document is not a FHIR Bundle")
    entries = bundle.get("entry") or []
    if not isinstance(entries, list):
        raise BundleParseError("Bundle.entry must be a list")

    resources_raw: list[tuple[int, dict]] = []
    reasons: dict[str, str] = {}
    for i, entry in enumerate(entries):
        res = entry.get("resource") if isinstance(entry, dict) else None
        if not isinstance(res, dict) or "resourceType" not in res:
            raise BundleParseError("entry has no resource with a resourceType", i)
        resources_raw.append((i, res))
        if res["resourceType"] == "Condition":
            coding = _first_coding(res.get("code"))
            if coding:
                for key in (entry.get("fullUrl"), res.get("id"), f"Condition/{res.get('id')}"):
                    if key:
                        reasons[key] = coding.display
        if res["resourceType"] == "Patient" and patient_id is None:
            patient_id = res.get("id")

    out: list[ClinicalResource] = []
    skipped: Counter[str] = Counter()
    for i, res in resources_raw:
        rtype = res["resourceType"]
        if rtype == "CarePlan":
            out.extend(_careplan_resources(res, reasons))
            continue
        if rtype not in RESOURCE_TYPES:
            skipped[rtype] += 1
            continue
        try:
            parsed = _parse_resource(res)
        except (ValueError, TypeError, KeyError) as exc:
            raise BundleParseError(f"malformed {rtype}: {exc}", i) from exc
        if parsed is None:
            logger.warning("skipping %s at entry %d: no usable coding", rtype, i)
            skipped[rtype] += 1
            continue
        out.append(parsed)
    return ClinicalStream(
        patient_id=patient_id or "unknown",
        resources=tuple(out),
        skipped=tuple(sorted(skipped.items())),
    )


def lookup(stream: ClinicalStream | Iterable[ClinicalResource], ref: Any) -> ClinicalResource | None:
    """Find the resource whose (type, system, code) tuple equals ``ref``'s.

    ``ref`` may be anything with ``resource_type``, ``code_system`` and
    ``code_value`` attributes, or a plain 3-tuple. Display text is ignored.
    """
    if isinstance(ref, tuple):
        key = ref[:3]
    else:
        key = (ref.resource_type, ref.code_system, ref.code_value)
    resources = stream.resources if isinstance(stream, ClinicalStream) else stream
    for r in resources:
        if r.key == key:
            return r
    return None


# --------------------------------------------------------------------------
# Curation
# --------------------------------------------------------------------------


def _latest_per_key(resources: list[ClinicalResource]) -> list[ClinicalResource]:
    """Keep the most recent resource per identity tuple, in first-seen order."""
    best: dict[tuple, ClinicalResource] = {}
    order: list[tuple] = []
    for r in resources:
        k = r.key
        if k not in best:
            order.append(k)
            best[k] = r
        elif (r.temporal or date.min) >= (best[k].temporal or date.min):
            best[k] = r
    return [best[k] for k in order]


def _section_order(rtype: str, items: list[ClinicalResource]) -> list[ClinicalResource]:
    if rtype == "Condition":
        return sorted(items, key=lambda r: r.temporal or date.min)
    if rtype == "MedicationRequest":
        # active first, newest first; stable for ties
        return sorted(items, key=lambda r: (r.status != "active", -(r.temporal or date.min).toordinal()))
    if rtype in ("Procedure", "Immunization"):
        return sorted(items, key=lambda r: r.temporal or date.min)
    return items


def _candidates(stream: ClinicalStream) -> dict[str, list[ClinicalResource]]:
    by_type: dict[str, list[ClinicalResource]] = {t: [] for _, t in _SECTIONS}
    for r in stream.resources:
        if r.resource_type == "Encounter":
            continue
        if r.resource_type == "Condition" and r.status not in ("", "active", "resolved"):
            continue
        by_type[r.resource_type].append(r)
    return {t: _section_order(t, _latest_per_key(items)) for t, items in by_type.items()}


def _trim_order(by_type: dict[str, list[ClinicalResource]]) -> list[ClinicalResource]:
    procedures = sorted(by_type["Procedure"], key=lambda r: r.temporal or date.min)
    observations = sorted(
        (r for r in by_type["Observation"] if r.code.code_value not in KEY_OBSERVATION_CODES),
        key=lambda r: r.temporal or date.min,
    )
    return procedures + observations


def curate(stream: ClinicalStream, budget: tuple[int, int] = DEFAULT_BUDGET) -> CuratedSummary:
    """Select resources for the prompt summary within a token window.

    Conditions (active, resolved, or without a status), medications,
    allergies, immunizations and care plans are always kept. Observations
    are reduced to the latest value per code. When the rendered text exceeds
    ``budget[1]`` tokens, procedures and then non-key observations are
    dropped oldest-first.
    """
    lo, hi = budget
    if not lo < hi:
        raise ValueError("budget must satisfy min < max")
    by_type = _candidates(stream)
    dropped: set[int] = set()
    trim_queue = _trim_order(by_type)

    def assemble() -> tuple[ClinicalResource, ...]:
        return tuple(
            r for _, t in _SECTIONS for r in by_type[t] if id(r) not in dropped
        )

    included = assemble()
    text = _render(included)
    for victim in trim_queue:
        if estimate_tokens(text) <= hi:
            break
        dropped.add(id(victim))
        included = assemble()
        text = _render(included)
    tokens = estimate_tokens(text)
    trimmed = tuple(r for r in trim_queue if id(r) in dropped)
    return CuratedSummary(
        text=text,
        included=included,
        estimated_tokens=tokens,
        budget=(lo, hi),
        below_floor=tokens < lo,
        over_budget=tokens > hi,
        trimmed=trimmed,
    )


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def render_line(r: ClinicalResource) -> str:
    parts = [f"[{r.resource_type}]", r.code.display]
    if r.resource_type == "Observation":
        if r.value:
            parts.append(f"= {r.value}")
        if r.temporal:
            parts.append(f"[{r.temporal.isoformat()}]")
    else:
        if r.status:
            parts.append(f"({r.status})")
        if r.temporal:
            label = _DATE_LABELS.get(r.resource_type, "date")
            parts.append(f"[{label}: {r.temporal.isoformat()}]")
    parts.append(r.code.tag)
    return "  - " + " ".join(parts)


def _render(resources: Iterable[ClinicalResource]) -> str:
    grouped: dict[str, list[ClinicalResource]] = {}
    for r in resources:
        grouped.setdefault(r.resource_type, []).append(r)
    blocks = []
    for header, rtype in _SECTIONS:
        if grouped.get(rtype):
            blocks.append("\n".join([header] + [render_line(r) for r in grouped[rtype]]))
    if not blocks:
        return ""
    return "\n\n".join(blocks) + "\n"


def render_summary(summary: CuratedSummary) -> str:
    """Render the curated resources as the tagged plain-text summary."""
    return _render(summary.included)


def summary_tags(text: str) -> list[tuple[str, str]]:
    """All ``[SYSTEM:CODE]`` tags appearing in rendered summary text."""
    return [(m.group(1), m.group(2)) for m in _TAG_RE.finditer(text)]


def tagged_refs(text: str) -> list[tuple[str, str, str]]:
    """(resource_type, system, code) for every resource line in ``text``."""
    out = []
    for line in text.splitlines():
        m = re.match(r"\s*- \[(\w+)\] .*\[([A-Za-z0-9-]+):([^\]\s]+)\]$", line)
        if m:
            out.append((m.group(1), m.group(2), m.group(3)))
    return out
