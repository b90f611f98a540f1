"""Terminology catalog and FHIR bundle builder for synthetic patients.

Codes follow the vocabularies Synthea emits (SNOMED CT, RxNorm, LOINC,
CVX). ``spoken`` is how a patient would name the item in conversation.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import date
from typing import Any

SNOMED = "http://snomed.info/sct"
RXNORM = "http://www.nlm.nih.gov/research/umls/rxnorm"
LOINC = "http://loinc.org"
CVX = "http://hl7.org/fhir/sid/cvx"


@dataclass(frozen=True)
class Concept:
    system: str
    code: str
    display: str
    spoken: str


def _c(system: str, rows: list[tuple[str, str, str]]) -> tuple[Concept, ...]:
    return tuple(Concept(system, code, display, spoken) for code, display, spoken in rows)


CONDITIONS = _c(
    SNOMED,
    [
        ("59621000", "Essential hypertension (disorder)", "high blood pressure"),
        ("15777000", "Prediabetes", "prediabetes"),
        ("44054006", "Diabetes mellitus type 2 (disorder)", "diabetes"),
        ("55822004", "Hyperlipidemia", "high cholesterol"),
        ("162864005", "Body mass index 30+ - obesity (finding)", "weight problem"),
        ("40055000", "Chronic sinusitis (disorder)", "sinus problem"),
        ("195967001", "Asthma", "asthma"),
        ("82423001", "Chronic pain", "chronic pain"),
        ("69896004", "Rheumatoid arthritis", "rheumatoid arthritis"),
        ("239873007", "Osteoarthritis of knee", "knee arthritis"),
        ("53741008", "Coronary heart disease", "heart disease"),
        ("49436004", "Atrial fibrillation", "irregular heartbeat"),
        ("271737000", "Anemia (disorder)", "anemia"),
        ("35489007", "Depressive disorder", "depression"),
        ("73595000", "Stress (finding)", "stress"),
        ("64859006", "Osteoporosis (disorder)", "osteoporosis"),
        ("90560007", "Gout", "gout"),
        ("78275009", "Obstructive sleep apnea syndrome", "sleep apnea"),
        ("431855005", "Chronic kidney disease stage 1 (disorder)", "kidney disease"),
        ("232353008", "Perennial allergic rhinitis with seasonal variation", "seasonal allergies"),
        ("24079001", "Atopic dermatitis", "eczema"),
        ("185086009", "Chronic obstructive bronchitis (disorder)", "bronchitis"),
        ("84229001", "Fatigue (finding)", "tiredness"),
        ("302870006", "Hypertriglyceridemia (disorder)", "high triglycerides"),
        ("44465007", "Sprain of ankle", "ankle sprain"),
        ("58150001", "Fracture of clavicle", "broken collarbone"),
        ("39848009", "Whiplash injury to neck", "neck injury"),
        ("68496003", "Polyp of colon", "colon polyp"),
        ("444814009", "Viral sinusitis (disorder)", "sinus infection"),
        ("10509002", "Acute bronchitis (disorder)", "chest cold"),
        ("195662009", "Acute viral pharyngitis (disorder)", "sore throat"),
        ("66383009", "Gingivitis (disorder)", "gum disease"),
        ("80394007", "Hyperglycemia (disorder)", "high blood sugar"),
        ("267036007", "Dyspnea (finding)", "shortness of breath"),
        ("230690007", "Cerebrovascular accident (disorder)", "stroke"),
    ],
)

MEDICATIONS = _c(
    RXNORM,
    [
        ("314076", "lisinopril 10 MG Oral Tablet", "lisinopril"),
        ("310798", "Hydrochlorothiazide 25 MG Oral Tablet", "water pill"),
        ("860975", "24 HR Metformin hydrochloride 500 MG Extended Release Oral Tablet", "metformin"),
        ("308182", "Amoxicillin 250 MG Oral Capsule", "amoxicillin"),
        ("197361", "amLODIPine 5 MG Oral Tablet", "amlodipine"),
        ("316672", "Simvastatin 10 MG Oral Tablet", "simvastatin"),
        ("259255", "Atorvastatin 80 MG Oral Tablet", "atorvastatin"),
        ("849574", "Naproxen sodium 220 MG Oral Tablet", "naproxen"),
        ("313782", "Acetaminophen 325 MG Oral Tablet", "tylenol"),
        ("310965", "Ibuprofen 200 MG Oral Tablet", "ibuprofen"),
        ("895994", "120 ACTUAT Fluticasone propionate 0.044 MG/ACTUAT Metered Dose Inhaler", "steroid inhaler"),
        ("745679", "200 ACTUAT Albuterol 0.09 MG/ACTUAT Metered Dose Inhaler", "rescue inhaler"),
        ("855332", "Warfarin Sodium 5 MG Oral Tablet", "warfarin"),
        ("309362", "Clopidogrel 75 MG Oral Tablet", "clopidogrel"),
        ("243670", "aspirin 81 MG Oral Tablet", "baby aspirin"),
        ("312938", "Sertraline 100 MG Oral Tablet", "sertraline"),
        ("834061", "Penicillin V Potassium 250 MG Oral Tablet", "penicillin"),
        ("106892", "insulin isophane, human 70 UNT/ML / insulin, regular, human 30 UNT/ML Injectable Suspension [Humulin]", "insulin"),
    ],
)

ALLERGIES = _c(
    SNOMED,
    [
        ("91936005", "Allergy to penicillin", "penicillin"),
        ("91935009", "Allergy to peanuts", "peanuts"),
        ("300913006", "Shellfish allergy", "shellfish"),
        ("232347008", "Dander (animal) allergy", "cats"),
        ("418689008", "Allergy to grass pollen", "grass pollen"),
        ("417532002", "Allergy to fish", "fish"),
        ("714035009", "Allergy to soya", "soy"),
        ("419474003", "Allergy to mould", "mold"),
    ],
)

IMMUNIZATIONS = _c(
    CVX,
    [
        ("140", "Influenza, seasonal, injectable, preservative free", "flu"),
        ("113", "Td (adult) preservative free", "tetanus"),
        ("133", "Pneumococcal conjugate PCV 13", "pneumonia"),
        ("121", "zoster", "shingles"),
        ("43", "Hep B, adult", "hepatitis B"),
        ("52", "Hep A, adult", "hepatitis A"),
        ("115", "Tdap", "whooping cough"),
    ],
)

# (care plan, activities)
CAREPLANS = (
    (
        Concept(SNOMED, "698360004", "Diabetes self management plan", "diabetes plan"),
        _c(SNOMED, [("160670007", "Diabetic diet", "diabetic diet"), ("229065009", "Exercise therapy", "exercise therapy")]),
    ),
    (
        Concept(SNOMED, "443402002", "Lifestyle education regarding hypertension (procedure)", "blood pressure plan"),
        _c(
            SNOMED,
            [
                ("386463000", "Prescribed activity/exercise education", "exercise plan"),
                ("1151000175103", "Dietary approaches to stop hypertension diet", "DASH diet"),
                ("413473000", "Counseling about alcohol consumption", "alcohol counseling"),
            ],
        ),
    ),
    (
        Concept(SNOMED, "53950000", "Respiratory therapy", "breathing plan"),
        _c(SNOMED, [("304510005", "Recommendation to avoid exercise", "exercise restriction"), ("371605008", "Deep breathing and coughing exercises", "breathing exercises")]),
    ),
    (
        Concept(SNOMED, "384758001", "Self-care interventions (procedure)", "self-care plan"),
        _c(SNOMED, [("409002", "Food allergy diet", "allergy diet"), ("58332002", "Allergy education", "allergy education")]),
    ),
    (
        Concept(SNOMED, "91251008", "Physical therapy procedure", "physical therapy plan"),
        _c(SNOMED, [("183051005", "Recommendation to rest", "rest recommendation"), ("408580007", "Physical activity target light exercise", "light exercise target")]),
    ),
)

# (concept, unit, low, high, decimals)
OBSERVATIONS = (
    (Concept(LOINC, "39156-5", "Body mass index (BMI) [Ratio]", "BMI"), "kg/m2", 24.0, 38.0, 2),
    (Concept(LOINC, "29463-7", "Body Weight", "weight"), "kg", 60.0, 120.0, 1),
    (Concept(LOINC, "4548-4", "Hemoglobin A1c/Hemoglobin.total in Blood", "A1c"), "%", 5.2, 8.5, 2),
    (Concept(LOINC, "2339-0", "Glucose", "blood sugar"), "mg/dL", 70.0, 180.0, 1),
    (Concept(LOINC, "2093-3", "Total Cholesterol", "cholesterol"), "mg/dL", 150.0, 260.0, 1),
    (Concept(LOINC, "18262-6", "Low Density Lipoprotein Cholesterol", "LDL"), "mg/dL", 70.0, 180.0, 1),
    (Concept(LOINC, "2085-9", "High Density Lipoprotein Cholesterol", "HDL"), "mg/dL", 30.0, 80.0, 1),
    (Concept(LOINC, "2571-8", "Triglycerides", "triglycerides"), "mg/dL", 80.0, 300.0, 1),
    (Concept(LOINC, "8867-4", "Heart rate", "heart rate"), "/min", 55.0, 100.0, 0),
    (Concept(LOINC, "72514-3", "Pain severity - 0-10 verbal numeric rating [Score] - Reported", "pain score"), "{score}", 0.0, 8.0, 0),
)

BP_PANEL = Concept(LOINC, "85354-9", "Blood pressure panel with all children optional", "blood pressure")

PROCEDURES = _c(
    SNOMED,
    [
        ("430193006", "Medication reconciliation (procedure)", "medication review"),
        ("710824005", "Assessment of health and social care needs (procedure)", "needs assessment"),
        ("171207006", "Depression screening (procedure)", "depression screening"),
        ("73761001", "Colonoscopy", "colonoscopy"),
        ("117015009", "Throat culture (procedure)", "throat swab"),
        ("23426006", "Measurement of respiratory function (procedure)", "breathing test"),
        ("399208008", "Plain chest X-ray (procedure)", "chest X-ray"),
        ("127783003", "Spirometry (procedure)", "spirometry"),
        ("609588000", "Total knee replacement", "knee replacement"),
        ("18286008", "Catheter ablation of tissue of heart", "heart ablation"),
        ("65575008", "Biopsy of colon", "colon biopsy"),
        ("76601001", "Intramuscular injection", "injection"),
        ("180256009", "Subcutaneous immunotherapy", "allergy shots"),
        ("274031008", "Rectal polypectomy", "polyp removal"),
        ("85548006", "Episiotomy", "episiotomy"),
        ("288086009", "Suture open wound", "stitches"),
        ("447365002", "Insertion of subcutaneous contraceptive", "implant"),
        ("52734007", "Total replacement of hip", "hip replacement"),
    ],
)


def _all_concepts() -> list[Concept]:
    out = [*CONDITIONS, *MEDICATIONS, *ALLERGIES, *IMMUNIZATIONS, *PROCEDURES, BP_PANEL]
    for plan, activities in CAREPLANS:
        out += [plan, *activities]
    out += [c for c, *_ in OBSERVATIONS]
    return out


_SHORT = {SNOMED: "SNOMED-CT", RXNORM: "RxNorm", LOINC: "LOINC", CVX: "CVX"}
SPOKEN = {(_SHORT[c.system], c.code): c.spoken for c in _all_concepts()}


def spoken_name(code_system: str, code_value: str, default: str = "") -> str:
    """Everyday name for a coded item; ``code_system`` is the short name used in summaries."""
    return SPOKEN.get((code_system, code_value), default)


# --------------------------------------------------------------------------
# Bundle construction
# --------------------------------------------------------------------------


@dataclass
class PatientRecord:
    """Clinical content for one synthetic patient, before serialization."""

    patient_id: str
    gender: str
    birth_date: date
    conditions: list[tuple[Concept, str, date]] = field(default_factory=list)
    medications: list[tuple[Concept, str, date]] = field(default_factory=list)
    allergies: list[tuple[Concept, date]] = field(default_factory=list)
    immunizations: list[tuple[Concept, date]] = field(default_factory=list)
    careplans: list[tuple[Concept, Concept, tuple[Concept, ...], date]] = field(default_factory=list)
    observations: list[tuple[Concept, str, float, date]] = field(default_factory=list)
    blood_pressure: list[tuple[float, float, date]] = field(default_factory=list)
    procedures: list[tuple[Concept, date]] = field(default_factory=list)
    encounters: list[date] = field(default_factory=list)


def _coding(c: Concept) -> dict[str, Any]:
    return {"coding": [{"system": c.system, "code": c.code, "display": c.display}], "text": c.display}


def _ts(d: date) -> str:
    return f"{d.isoformat()}T10:00:00-05:00"


def _status_cc(code: str) -> dict[str, Any]:
    return {"coding": [{"system": "http://terminology.hl7.org/CodeSystem/condition-clinical", "code": code}]}


def to_bundle(rec: PatientRecord) -> dict[str, Any]:
    """Serialize a :class:`PatientRecord` as a FHIR R4 collection Bundle."""
    entries: list[dict[str, Any]] = []
    counter = iter(range(10**6))

    def add(resource: dict[str, Any], prefix: str) -> str:
        rid = f"{rec.patient_id}-{prefix}{next(counter)}"
        resource["id"] = rid
        entries.append({"fullUrl": f"urn:uuid:{rid}", "resource": resource})
        return rid

    add({"resourceType": "Patient", "gender": rec.gender, "birthDate": rec.birth_date.isoformat()}, "pt")
    cond_ids: dict[str, str] = {}
    for c, status, onset in rec.conditions:
        res = {"resourceType": "Condition", "code": _coding(c), "onsetDateTime": _ts(onset)}
        if status:
            res["clinicalStatus"] = _status_cc(status)
        cond_ids[c.code] = add(res, "c")
    for m, status, authored in rec.medications:
        add(
            {
                "resourceType": "MedicationRequest",
                "status": status,
                "intent": "order",
                "medicationCodeableConcept": _coding(m),
                "authoredOn": _ts(authored),
            },
            "m",
        )
    for a, recorded in rec.allergies:
        add(
            {
                "resourceType": "AllergyIntolerance",
                "clinicalStatus": {
                    "coding": [{"system": "http://terminology.hl7.org/CodeSystem/allergyintolerance-clinical", "code": "active"}]
                },
                "code": _coding(a),
                "recordedDate": _ts(recorded),
            },
            "a",
        )
    for v, when in rec.immunizations:
        add({"resourceType": "Immunization", "status": "completed", "vaccineCode": _coding(v), "occurrenceDateTime": _ts(when)}, "i")
    for plan, reason, activities, start in rec.careplans:
        res: dict[str, Any] = {
            "resourceType": "CarePlan",
            "status": "active",
            "category": [_coding(plan)],
            "activity": [{"detail": {"code": _coding(a), "status": "in-progress"}} for a in activities],
            "period": {"start": _ts(start)},
        }
        if reason.code in cond_ids:
            res["addresses"] = [{"reference": f"urn:uuid:{cond_ids[reason.code]}"}]
        add(res, "cp")
    for o, unit, value, when in rec.observations:
        add(
            {
                "resourceType": "Observation",
                "status": "final",
                "code": _coding(o),
                "effectiveDateTime": _ts(when),
                "valueQuantity": {"value": value, "unit": unit},
            },
            "o",
        )
    for sys_bp, dia_bp, when in rec.blood_pressure:
        add(
            {
                "resourceType": "Observation",
                "status": "final",
                "code": _coding(BP_PANEL),
                "effectiveDateTime": _ts(when),
                "component": [
                    {
                        "code": _coding(Concept(LOINC, "8480-6", "Systolic Blood Pressure", "")),
                        "valueQuantity": {"value": sys_bp, "unit": "mm[Hg]"},
                    },
                    {
                        "code": _coding(Concept(LOINC, "8462-4", "Diastolic Blood Pressure", "")),
                        "valueQuantity": {"value": dia_bp, "unit": "mm[Hg]"},
                    },
                ],
            },
            "o",
        )
    for p, when in rec.procedures:
        add({"resourceType": "Procedure", "status": "completed", "code": _coding(p), "performedDateTime": _ts(when)}, "pr")
    for when in rec.encounters:
        add(
            {
                "resourceType": "Encounter",
                "status": "finished",
                "type": [_coding(Concept(SNOMED, "185349003", "Encounter for check up (procedure)", ""))],
                "period": {"start": _ts(when)},
            },
            "e",
        )
    return {"resourceType": "Bundle", "type": "collection", "entry": entries}


def _day(rng: random.Random, lo: date, hi: date) -> date:
    return date.fromordinal(rng.randint(lo.toordinal(), hi.toordinal()))


def random_record(
    rng: random.Random,
    patient_id: str,
    reference_date: date,
    n_conditions: int = 12,
    n_medications: int = 5,
    n_allergies: int = 1,
    n_immunizations: int = 3,
    n_careplans: int = 2,
    n_procedures: int = 8,
    n_observation_dates: int = 2,
) -> PatientRecord:
    """A plausible multi-morbid record; every coded item is drawn without replacement."""
    gender = rng.choice(["female", "male"])
    birth = _day(rng, date(1945, 1, 1), date(1985, 12, 31))
    since = date(max(birth.year + 18, 1990), 1, 1)
    rec = PatientRecord(patient_id, gender, birth)
    for c in rng.sample(CONDITIONS, n_conditions):
        rec.conditions.append((c, rng.choice(["active", "active", "active", "resolved"]), _day(rng, since, reference_date)))
    for m in rng.sample(MEDICATIONS, n_medications):
        rec.medications.append((m, rng.choice(["active", "active", "stopped"]), _day(rng, since, reference_date)))
    for a in rng.sample(ALLERGIES, n_allergies):
        rec.allergies.append((a, _day(rng, since, reference_date)))
    for v in rng.sample(IMMUNIZATIONS, n_immunizations):
        rec.immunizations.append((v, _day(rng, since, reference_date)))
    conds = [c for c, _, _ in rec.conditions]
    for plan, activities in rng.sample(CAREPLANS, n_careplans):
        reason = rng.choice(conds)
        rec.careplans.append((plan, reason, activities, _day(rng, since, reference_date)))
    obs_pool = rng.sample(OBSERVATIONS, 6)
    for _ in range(n_observation_dates):
        when = _day(rng, date(reference_date.year - 3, 1, 1), reference_date)
        for concept, unit, lo, hi, dec in obs_pool:
            rec.observations.append((concept, unit, round(rng.uniform(lo, hi), dec), when))
        rec.blood_pressure.append((float(rng.randint(105, 165)), float(rng.randint(65, 100)), when))
    for p in rng.sample(PROCEDURES, n_procedures):
        rec.procedures.append((p, _day(rng, since, reference_date)))
    for _ in range(3):
        rec.encounters.append(_day(rng, since, reference_date))
    return rec
