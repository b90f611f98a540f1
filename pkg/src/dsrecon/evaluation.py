"""Metrics for the three evaluation dimensions and the error cascade.

Dimension 1 scores extraction with two LLM judges. Dimensions 2 and 3 score
reconciliation per scenario session, from ground-truth memories and from the
replayed extraction respectively. The cascade compares the two paired over
scenarios.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .corpus import GroundTruthEvent, HybridTranscript, Scenario
from .llm_gateway import ChatRequest, Gateway, GatewayError
from .narrative_memory import MemorySnapshot, MemoryStore
from .prompts import JUDGE_EVENT_TEMPLATE, JUDGE_TRANSCRIPT_TEMPLATE, fill
from .reconciliation import CONTRADICTION_TYPES, SEVERITIES, SEVERITY_RANK, ReconciliationResult

VERDICTS = ("MATCH", "PARTIAL", "NO_MATCH")
RefKey = tuple[str, str, str]


class JudgeError(GatewayError):
    def __init__(self, event_id: str, cause: Exception) -> None:
        super().__init__(f"judge failed for {event_id}: {cause}", getattr(cause, "raw", None))
        self.event_id = event_id


# --------------------------------------------------------------------------
# Dimension 1
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    event_id: str
    verdict: str
    content_fidelity: int | None = None
    reasoning: str = ""
    patient_id: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in VERDICTS:
            raise ValueError(f"invalid verdict {self.verdict!r}")
        if self.content_fidelity is not None and not 1 <= self.content_fidelity <= 5:
            raise ValueError("content_fidelity must be 1-5")

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "patient_id": self.patient_id,
            "verdict": self.verdict,
            "content_fidelity": self.content_fidelity,
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JudgeVerdict:
        return cls(d["event_id"], d["verdict"], d.get("content_fidelity"), d.get("reasoning", ""), d.get("patient_id", ""))


def memory_listing(state: MemoryStore | MemorySnapshot) -> str:
    records = state.records()
    if not records:
        return "(no memories)"
    return "\n".join(f"- {r.content}" for r in records)


def build_judge_event_request(event: GroundTruthEvent, snapshot: MemoryStore | MemorySnapshot) -> ChatRequest:
    user = fill(
        JUDGE_EVENT_TEMPLATE,
        utterance=event.utterance,
        memory_content=event.memory_content,
        memories=memory_listing(snapshot),
    )
    return ChatRequest(system_text="", user_text=user, schema_id="judge_event")


def judge_event(
    gateway: Gateway, event: GroundTruthEvent, snapshot: MemoryStore | MemorySnapshot, patient_id: str = ""
) -> JudgeVerdict:
    """Ask the judge whether ``event`` is captured in the post-utterance memory state."""
    try:
        value = gateway.complete_structured(build_judge_event_request(event, snapshot))
    except GatewayError as exc:
        raise JudgeError(event.event_id, exc) from exc
    return JudgeVerdict(event.event_id, value["verdict"], value["content_fidelity"], value["reasoning"], patient_id)


def dim1_metrics(verdicts: Sequence[JudgeVerdict]) -> dict[str, float]:
    if not verdicts:
        raise ValueError("dim1_metrics needs at least one verdict")
    counts = Counter(v.verdict for v in verdicts)
    n = len(verdicts)
    return {
        "recall": (counts["MATCH"] + counts["PARTIAL"]) / n,
        "strict_recall": counts["MATCH"] / n,
        "n": n,
        "match": counts["MATCH"],
        "partial": counts["PARTIAL"],
        "no_match": counts["NO_MATCH"],
    }


def transcript_text(transcript: HybridTranscript) -> str:
    blocks = []
    for s in transcript.sessions:
        lines = [f"--- Session {s.session_id} ({s.session_date.isoformat()}) ---"]
        lines += [f"{t.speaker}: {t.text}" for t in s.turns]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def build_judge_transcript_request(transcript: HybridTranscript, final_state: MemoryStore | MemorySnapshot) -> ChatRequest:
    from .narrative_memory import clean_view

    user = fill(
        JUDGE_TRANSCRIPT_TEMPLATE,
        transcript=transcript_text(transcript),
        memories=clean_view(final_state) or "(no memories)",
    )
    return ChatRequest(system_text="", user_text=user, schema_id="judge_transcript")


def judge_transcript(
    gateway: Gateway, transcript: HybridTranscript, final_state: MemoryStore | MemorySnapshot
) -> dict[str, int]:
    try:
        value = gateway.complete_structured(build_judge_transcript_request(transcript, final_state))
    except GatewayError as exc:
        raise JudgeError(f"transcript:{transcript.patient_id}", exc) from exc
    return {
        "faithfulness": value["faithfulness"]["score"],
        "deduplication": value["deduplication"]["score"],
    }


# --------------------------------------------------------------------------
# Dimensions 2 and 3
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario_id: str
    detected: bool
    resource_informed: bool
    predicted_severity: str | None
    matched_refs: frozenset[RefKey]
    predicted_refs: frozenset[RefKey]
    expected_refs: frozenset[RefKey]
    classification: str | None = None

    def __post_init__(self) -> None:
        if self.resource_informed and not self.detected:
            raise ValueError("resource_informed implies detected")
        if self.matched_refs != self.predicted_refs & self.expected_refs:
            raise ValueError("matched_refs must equal predicted ∩ expected")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "detected": self.detected,
            "resource_informed": self.resource_informed,
            "predicted_severity": self.predicted_severity,
            "classification": self.classification,
            "matched_refs": sorted(map(list, self.matched_refs)),
            "predicted_refs": sorted(map(list, self.predicted_refs)),
            "expected_refs": sorted(map(list, self.expected_refs)),
        }


def score_scenario(scenario: Scenario, results: Iterable[ReconciliationResult]) -> ScenarioOutcome:
    """Collapse one scenario session's reconciliation results into an outcome.

    The session counts as detected if any result is a contradiction or gap.
    Predicted severity is the highest severity among detected results and the
    reported classification is that of the first such result.
    """
    flagged = [r for r in results if r.detected]
    expected = frozenset(r.key for r in scenario.expected_refs)
    predicted = frozenset(ref.key for r in flagged for ref in r.fhir_resources_considered)
    matched = predicted & expected
    severity = classification = None
    if flagged:
        top = max(flagged, key=lambda r: SEVERITY_RANK[r.clinical_severity])
        severity, classification = top.clinical_severity, top.contradiction_type
    return ScenarioOutcome(
        scenario.scenario_id,
        detected=bool(flagged),
        resource_informed=bool(flagged) and bool(matched),
        predicted_severity=severity,
        matched_refs=matched,
        predicted_refs=predicted,
        expected_refs=expected,
        classification=classification,
    )


def score_all(
    scenarios: Sequence[Scenario], results: Iterable[ReconciliationResult]
) -> list[ScenarioOutcome]:
    by_session: dict[str, list[ReconciliationResult]] = defaultdict(list)
    for r in results:
        by_session[r.session_id].append(r)
    return [score_scenario(s, by_session.get(s.session_id, [])) for s in scenarios]


def _mean(xs: Sequence[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def dim_metrics(outcomes: Sequence[ScenarioOutcome], scenarios: Sequence[Scenario]) -> dict[str, Any]:
    """Detection, resource-informed detection, safety recall, severity and resource metrics.

    Undetected scenarios count as severity misses and contribute zero
    resource recall; scenarios with no cited resources are left out of the
    precision mean.
    """
    by_id = {s.scenario_id: s for s in scenarios}
    if len(by_id) != len(outcomes) or any(o.scenario_id not in by_id for o in outcomes):
        raise ValueError("need exactly one outcome per scenario")
    n = len(outcomes)
    if n == 0:
        raise ValueError("no scenarios")

    sev_exact, sev_within = [], []
    res_recall, res_precision = [], []
    safety = []
    per_severity: dict[str, list[bool]] = {s: [] for s in SEVERITIES}
    for o in outcomes:
        sc = by_id[o.scenario_id]
        gt = SEVERITY_RANK[sc.severity_gt]
        pred = SEVERITY_RANK[o.predicted_severity] if o.detected and o.predicted_severity else None
        sev_exact.append(pred is not None and pred == gt)
        sev_within.append(pred is not None and abs(pred - gt) <= 1)
        res_recall.append(len(o.matched_refs) / len(o.expected_refs))
        if o.predicted_refs:
            res_precision.append(len(o.matched_refs) / len(o.predicted_refs))
        if sc.safety_critical:
            safety.append(o.detected)
        per_severity[sc.severity_gt].append(o.detected)

    classes = Counter(o.classification for o in outcomes if o.detected)
    detected_n = sum(o.detected for o in outcomes)
    return {
        "n_scenarios": n,
        "detected_count": detected_n,
        "detection": detected_n / n,
        "resource_informed": sum(o.resource_informed for o in outcomes) / n,
        "safety_recall": _mean(safety),
        "n_safety_critical": len(safety),
        "severity_exact": sum(sev_exact) / n,
        "severity_within1": sum(sev_within) / n,
        "resource_recall_mean": sum(res_recall) / n,
        "resource_precision_mean": _mean(res_precision),
        "n_precision_defined": len(res_precision),
        "detection_by_severity": {k: _mean(v) for k, v in per_severity.items()},
        "classification_distribution": {
            c: classes.get(c, 0) / detected_n if detected_n else 0.0 for c in ("contradiction", "gap_patient")
        },
        "per_type": per_type_table(outcomes, scenarios),
    }


def per_type_table(outcomes: Sequence[ScenarioOutcome], scenarios: Sequence[Scenario]) -> list[dict[str, Any]]:
    """Detection rate per FHIR resource type among each scenario's expected refs.

    A scenario is counted once under every distinct type it expects.
    """
    by_id = {s.scenario_id: s for s in scenarios}
    tally: dict[str, list[bool]] = defaultdict(list)
    for o in outcomes:
        for rtype in sorted({r.resource_type for r in by_id[o.scenario_id].expected_refs}):
            tally[rtype].append(o.detected)
    return [
        {"resource_type": t, "scenarios": len(v), "detection": sum(v) / len(v)}
        for t, v in sorted(tally.items())
    ]


def specificity_distribution(results: Sequence[ReconciliationResult]) -> dict[str, float]:
    """Fraction of results per classification (all four keys present)."""
    if not results:
        return {c: 0.0 for c in CONTRADICTION_TYPES}
    counts = Counter(r.contradiction_type for r in results)
    return {c: counts.get(c, 0) / len(results) for c in CONTRADICTION_TYPES}


# --------------------------------------------------------------------------
# Cascade and bootstrap
# --------------------------------------------------------------------------


def paired_bootstrap_ci(
    before: Sequence[bool],
    after: Sequence[bool],
    seed: int = 0,
    iterations: int = 10_000,
    clusters: Sequence[str] | None = None,
) -> tuple[float, float]:
    """95% percentile CI for mean(after) - mean(before), resampling units with replacement.

    With ``clusters`` the resampling unit is the cluster label (e.g. patient)
    and the difference is taken over all scenarios in the drawn clusters.
    """
    a = np.asarray(before, dtype=float)
    b = np.asarray(after, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("paired samples must be non-empty and equal length")
    rng = np.random.default_rng(seed)
    if clusters is None:
        idx = rng.integers(0, a.size, size=(iterations, a.size))
        diffs = b[idx].mean(axis=1) - a[idx].mean(axis=1)
    else:
        labels = sorted(set(clusters))
        pos = {c: i for i, c in enumerate(labels)}
        lab = np.array([pos[c] for c in clusters])
        sums_a = np.bincount(lab, weights=a, minlength=len(labels))
        sums_b = np.bincount(lab, weights=b, minlength=len(labels))
        sizes = np.bincount(lab, minlength=len(labels)).astype(float)
        draw = rng.integers(0, len(labels), size=(iterations, len(labels)))
        diffs = (sums_b[draw].sum(axis=1) - sums_a[draw].sum(axis=1)) / sizes[draw].sum(axis=1)
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    return float(lo), float(hi)


def bootstrap_rate_ci(values: Sequence[bool], seed: int = 0, iterations: int = 10_000) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(iterations, x.size))].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(lo), float(hi)


def cascade(
    dim2: Sequence[ScenarioOutcome],
    dim3: Sequence[ScenarioOutcome],
    seed: int = 0,
    iterations: int = 10_000,
    patient_of: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Detections lost and gained between isolated and coupled reconciliation.

    Pass ``patient_of`` (scenario id to patient id) to bootstrap over
    patients instead of scenarios.
    """
    d2 = {o.scenario_id: o for o in dim2}
    d3 = {o.scenario_id: o for o in dim3}
    if set(d2) != set(d3) or len(d2) != len(dim2) or len(d3) != len(dim3):
        raise ValueError("dim2 and dim3 must cover the same scenario ids")
    ids = sorted(d2)
    before = [d2[i].detected for i in ids]
    after = [d3[i].detected for i in ids]
    lost = [i for i in ids if d2[i].detected and not d3[i].detected]
    gained = [i for i in ids if not d2[i].detected and d3[i].detected]
    n2, n3 = sum(before), sum(after)
    if n3 != n2 - len(lost) + len(gained):
        raise AssertionError("cascade accounting identity violated")
    clusters = [patient_of[i] for i in ids] if patient_of is not None else None
    lo, hi = paired_bootstrap_ci(before, after, seed, iterations, clusters)
    return {
        "delta": n3 / len(ids) - n2 / len(ids),
        "dim2_detected": n2,
        "dim3_detected": n3,
        "lost": lost,
        "gained": gained,
        "ci_low": lo,
        "ci_high": hi,
        "bootstrap": {
            "unit": "patient" if clusters is not None else "scenario",
            "iterations": iterations,
            "seed": seed,
            "percentiles": [2.5, 97.5],
        },
        "identity_holds": True,
    }


# --------------------------------------------------------------------------
# Correlation
# --------------------------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> dict[str, float]:
    """Product-moment correlation with a two-sided t-test p-value (n-2 df)."""
    n = len(x)
    if n != len(y) or n < 3:
        raise ValueError("pearson needs two equal-length samples of at least 3 points")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for a zero-variance sample")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = float(2 * stats.t.sf(abs(t), n - 2))
    return {"r": r, "p": p, "n": n}


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    dim1: dict[str, Any]
    dim2: dict[str, Any]
    dim3: dict[str, Any]
    cascade: dict[str, Any]
    correlations: dict[str, Any]
    specificity: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("dim2", "dim3"):
            for key in (
                "detection",
                "resource_informed",
                "safety_recall",
                "severity_exact",
                "severity_within1",
                "resource_recall_mean",
                "resource_precision_mean",
            ):
                v = getattr(self, name)[key]
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}.{key} outside [0, 1]")
        expected = self.dim3["detection"] - self.dim2["detection"]
        if not math.isclose(self.cascade["delta"], expected, abs_tol=1e-12):
            raise ValueError("cascade.delta must equal dim3.detection - dim2.detection")

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim1": self.dim1,
            "dim2": self.dim2,
            "dim3": self.dim3,
            "cascade": self.cascade,
            "correlations": self.correlations,
            "specificity": self.specificity,
            "notes": self.notes,
        }


REPORT_NOTES = [
    "Undetected scenarios count as severity misses and score zero resource recall.",
    "Resource precision is averaged only over scenarios that cited at least one resource.",
    "Severity for a session with several flagged results is the ordinal maximum.",
    "Dimension 1 recall, faithfulness and deduplication are means over patients; pooled rates are also given.",
    "Correlation p-values use the t approximation with n-2 degrees of freedom.",
]


def dim1_report(
    verdicts: Sequence[JudgeVerdict],
    transcript_scores: Mapping[str, Mapping[str, int]],
    patient_turns: Mapping[str, int],
    final_memories: Mapping[str, int],
) -> dict[str, Any]:
    by_patient: dict[str, list[JudgeVerdict]] = defaultdict(list)
    for v in verdicts:
        by_patient[v.patient_id].append(v)
    per_patient = []
    for pid in sorted(set(by_patient) | set(transcript_scores)):
        row: dict[str, Any] = {"patient_id": pid, "patient_turns": patient_turns.get(pid, 0)}
        if by_patient.get(pid):
            m = dim1_metrics(by_patient[pid])
            row.update(recall=m["recall"], strict_recall=m["strict_recall"], events=m["n"])
        row.update(transcript_scores.get(pid, {}))
        row["final_memories"] = final_memories.get(pid, 0)
        per_patient.append(row)
    pooled = dim1_metrics(verdicts) if verdicts else None
    with_events = [r for r in per_patient if "recall" in r]
    scored = [r for r in per_patient if "faithfulness" in r]

    def spread(rows: list[dict], key: str) -> dict[str, float | None]:
        vals = [r[key] for r in rows]
        if not vals:
            return {"mean": None, "min": None, "max": None}
        return {"mean": sum(vals) / len(vals), "min": min(vals), "max": max(vals)}

    return {
        "recall": spread(with_events, "recall")["mean"],
        "strict_recall": spread(with_events, "strict_recall")["mean"],
        "faithfulness": spread(scored, "faithfulness")["mean"],
        "deduplication": spread(scored, "deduplication")["mean"],
        "ranges": {k: spread(with_events if "recall" in k else scored, k) for k in ("recall", "strict_recall", "faithfulness", "deduplication")},
        "pooled": pooled,
        "patient_turns": sum(patient_turns.values()),
        "final_memories": sum(final_memories.values()),
        "per_patient": per_patient,
    }


def _safe_pearson(x: list[float], y: list[float]) -> dict[str, float] | None:
    try:
        return pearson(x, y)
    except ValueError:
        return None


def build_report(
    dim1: dict[str, Any],
    scenarios: Sequence[Scenario],
    dim2_outcomes: Sequence[ScenarioOutcome],
    dim3_outcomes: Sequence[ScenarioOutcome],
    real_session_results: Sequence[ReconciliationResult],
    seed: int = 0,
    iterations: int = 10_000,
    bootstrap_unit: str = "scenario",
) -> EvalReport:
    dim2 = dim_metrics(dim2_outcomes, scenarios)
    dim3 = dim_metrics(dim3_outcomes, scenarios)
    for name, block, outs in (("dim2", dim2, dim2_outcomes), ("dim3", dim3, dim3_outcomes)):
        block["ci"] = {
            "detection": bootstrap_rate_ci([o.detected for o in outs], seed, iterations),
            "resource_informed": bootstrap_rate_ci([o.resource_informed for o in outs], seed, iterations),
        }
    patient_of = {s.scenario_id: s.patient_id for s in scenarios}
    casc = cascade(
        dim2_outcomes,
        dim3_outcomes,
        seed,
        iterations,
        patient_of if bootstrap_unit == "patient" else None,
    )
    sev = {s.scenario_id: s.severity_gt for s in scenarios}
    safety_ids = {s.scenario_id for s in scenarios if s.safety_critical}
    casc["lost_by_severity"] = dict(Counter(sev[i] for i in casc["lost"]))
    casc["lost_safety_critical"] = sum(1 for i in casc["lost"] if i in safety_ids)

    rows = [r for r in dim1["per_patient"] if "recall" in r]
    if rows:
        # patient-level bootstrap of the macro means
        dim1 = {
            **dim1,
            "ci": {k: bootstrap_rate_ci([r[k] for r in rows], seed, iterations) for k in ("recall", "strict_recall")},
        }
    d3_by_patient: dict[str, list[bool]] = defaultdict(list)
    for o in dim3_outcomes:
        d3_by_patient[patient_of[o.scenario_id]].append(o.detected)
    det_rows = [r for r in dim1["per_patient"] if d3_by_patient.get(r["patient_id"])]
    correlations = {
        "recall_vs_turns": _safe_pearson([r["patient_turns"] for r in rows], [r["recall"] for r in rows]),
        "recall_vs_final_memories": _safe_pearson([r["final_memories"] for r in rows], [r["recall"] for r in rows]),
        "detection_vs_turns": _safe_pearson(
            [r["patient_turns"] for r in det_rows],
            [sum(d3_by_patient[r["patient_id"]]) / len(d3_by_patient[r["patient_id"]]) for r in det_rows],
        ),
        "detection_vs_final_memories": _safe_pearson(
            [r["final_memories"] for r in det_rows],
            [sum(d3_by_patient[r["patient_id"]]) / len(d3_by_patient[r["patient_id"]]) for r in det_rows],
        ),
    }
    specificity = {
        "n_results": len(real_session_results),
        "distribution": specificity_distribution(real_session_results),
    }
    return EvalReport(dim1, dim2, dim3, casc, correlations, specificity, list(REPORT_NOTES))


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}%"


def _num(v: float | None, fmt: str = "{:.3f}") -> str:
    return "n/a" if v is None else fmt.format(v)


def render_report(report: EvalReport) -> str:
    """Plain-text tables in the order: extraction, reconciliation, cascade, types, specificity."""
    d1, d2, d3, c = report.dim1, report.dim2, report.dim3, report.cascade
    out = ["MEMORY EXTRACTION (Dimension 1)"]
    for label, key, fmt in (
        ("GT Recall (match + partial)", "recall", "{:.3f}"),
        ("Strict Recall (match only)", "strict_recall", "{:.3f}"),
        ("Faithfulness (/5)", "faithfulness", "{:.1f}"),
        ("Deduplication (/5)", "deduplication", "{:.1f}"),
    ):
        rng = d1["ranges"][key]
        ci = d1.get("ci", {}).get(key)
        ci_text = f"   95% CI [{ci[0]:.3f}, {ci[1]:.3f}]" if ci else ""
        out.append(
            f"  {label:<30} {_num(d1[key], fmt):>7}   range {_num(rng['min'], fmt)}-{_num(rng['max'], fmt)}{ci_text}"
        )
    out.append(f"  {'Patient turns processed':<30} {d1['patient_turns']:>7}")
    out.append(f"  {'Final memories extracted':<30} {d1['final_memories']:>7}")
    out.append("")
    out.append("RECONCILIATION (Dimension 2 isolated vs Dimension 3 pipeline)")
    out.append(f"  {'Metric':<30} {'Isolated':>9} {'Pipeline':>9} {'Delta':>8}")
    for label, key in (
        ("Detection rate", "detection"),
        ("Resource-informed detection", "resource_informed"),
        ("Safety recall", "safety_recall"),
        ("Severity within-1", "severity_within1"),
        ("Severity exact match", "severity_exact"),
        ("Resource recall (mean)", "resource_recall_mean"),
        ("Resource precision (mean)", "resource_precision_mean"),
    ):
        a, b = d2[key], d3[key]
        delta = "n/a" if a is None or b is None else f"{100 * (b - a):+.1f}%"
        out.append(f"  {label:<30} {_pct(a):>9} {_pct(b):>9} {delta:>8}")
    out.append("")
    out.append("ERROR CASCADE")
    out.append(f"  detected: {c['dim2_detected']} -> {c['dim3_detected']}  lost {len(c['lost'])}  gained {len(c['gained'])}")
    out.append(
        f"  delta {100 * c['delta']:+.1f}%  95% CI [{100 * c['ci_low']:+.1f}%, {100 * c['ci_high']:+.1f}%]"
        f"  ({c['bootstrap']['unit']} bootstrap, {c['bootstrap']['iterations']} iterations, seed {c['bootstrap']['seed']})"
    )
    out.append("")
    out.append("DETECTION BY FHIR RESOURCE TYPE")
    out.append(f"  {'Resource Type':<20} {'Scenarios':>9} {'Isolated':>9} {'Pipeline':>9}")
    d3_types = {row["resource_type"]: row for row in d3["per_type"]}
    for row in d2["per_type"]:
        other = d3_types.get(row["resource_type"], {}).get("detection")
        out.append(f"  {row['resource_type']:<20} {row['scenarios']:>9} {_pct(row['detection']):>9} {_pct(other):>9}")
    out.append("")
    out.append("SPECIFICITY (real sessions)")
    spec = report.specificity
    out.append(f"  results: {spec.get('n_results', 0)}")
    for k, v in spec.get("distribution", {}).items():
        out.append(f"  {k:<14} {_pct(v):>7}")
    out.append("")
    out.append("CORRELATIONS")
    order = ("recall_vs_turns", "recall_vs_final_memories", "detection_vs_turns", "detection_vs_final_memories")
    for k in sorted(report.correlations, key=lambda k: (order.index(k) if k in order else len(order), k)):
        v = report.correlations[k]
        out.append(f"  {k:<28} " + ("n/a" if v is None else f"r = {v['r']:+.2f}, p = {v['p']:.3f}"))
    out.append("")
    out.append("NOTES")
    out.extend(f"  - {n}" for n in report.notes)
    return "\n".join(out) + "\n"
