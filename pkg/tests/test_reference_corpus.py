from __future__ import annotations

from collections import Counter

import pytest

from dsrecon.dataset import gt_isolation_hits
from dsrecon.fhir_ingest import lookup
from dsrecon.evaluation import specificity_distribution
from dsrecon.pipeline import reconcile_pipeline, run_all, run_dim1
from dsrecon.reference_corpus import materialize, small_design
from dsrecon.synthetic import ScriptPlan, build_corpus, scripted_gateway

# -- small designs --------------------------------------------------------


def test_small_run_is_clean(small_run):
    blueprint, built, run, gw = small_run
    assert run.failures == []
    assert len(built.transcripts) == 4 and len(built.scenarios) == 12
    for t in built.transcripts:
        synth = [s for s in t.sessions if s.kind == "synthetic"]
        assert len(synth) == 3
        assert all(s.scenario_id for s in synth)
        dates = [s.session_date for s in t.sessions]
        assert dates == sorted(dates)


def test_small_run_traces_cover_every_patient_turn(small_run):
    _, built, run, _ = small_run
    for t in built.transcripts:
        assert len(run.dim1.traces[t.patient_id]) == t.patient_turns


def test_small_run_gt_isolation(small_run):
    _, built, _, gw = small_run
    assert gt_isolation_hits(gw.audit.entries, [s.text for s in built.summaries.values()]) == []


def test_small_run_citations_resolve(small_run):
    _, built, run, _ = small_run
    for r in run.isolated + run.coupled:
        assert r.cited_unknown == ()
        for ref in r.fhir_resources_considered:
            assert lookup(built.summaries[r.patient_id].included, ref) is not None


def test_small_design_is_deterministic():
    def go():
        bp = materialize(small_design(seed=3), seed=3)
        gw = scripted_gateway(ScriptPlan.from_blueprint(bp))
        built = build_corpus(bp, gw)
        return run_all(gw, gw, gw, built.transcripts, built.scenarios, built.summaries, iterations=300).report.to_dict()

    assert go() == go()


def discrepancy_free_run(seed: int = 11):
    """50 real sessions, no scenarios; the scripted engine flags gaps but never contradictions."""
    bp = materialize(small_design(seed=seed, patients=5, scenarios=0, real_sessions=10, extra_changed=40, gaps=6, agreements=2), seed=seed)
    gw = scripted_gateway(ScriptPlan.from_blueprint(bp))
    built = build_corpus(bp, gw)
    d1 = run_dim1(gw, gw, built.transcripts)
    results, failures = reconcile_pipeline(gw, built.transcripts, d1.traces, built.summaries)
    return built, results, failures


def test_discrepancy_free_corpus_has_no_contradictions():
    built, results, failures = discrepancy_free_run()
    assert sum(len(t.sessions) for t in built.transcripts) == 50
    assert all(s.kind == "real" for t in built.transcripts for s in t.sessions)
    assert failures == [] and results
    spec = specificity_distribution(results)
    assert spec["contradiction"] == 0.0
    assert spec["gap_patient"] > 0 and spec["agreement"] > 0


# -- reference scale ------------------------------------------------------


@pytest.mark.slow
def test_reference_corpus_shape(reference):
    built, run, _ = reference
    sessions = [s for t in built.transcripts for s in t.sessions]
    assert len(built.transcripts) == 26
    assert Counter(s.kind for s in sessions) == {"real": 432, "synthetic": 243}
    assert sum(t.patient_turns for t in built.transcripts) == 2296
    gt = Counter(s.kind for s in sessions for _ in s.gt_events)
    assert gt == {"real": 522, "synthetic": 429}
    assert round(429 / 243, 1) == 1.8
    assert run.failures == []


@pytest.mark.slow
def test_reference_dimension_one(reference):
    _, run, _ = reference
    d1 = run.report.dim1
    assert round(d1["recall"], 3) == 0.708 and round(d1["strict_recall"], 3) == 0.262
    assert round(d1["faithfulness"], 1) == 4.8 and round(d1["deduplication"], 1) == 3.6
    assert (round(d1["ranges"]["recall"]["min"], 2), round(d1["ranges"]["recall"]["max"], 2)) == (0.49, 0.88)
    assert (round(d1["ranges"]["strict_recall"]["min"], 2), round(d1["ranges"]["strict_recall"]["max"], 2)) == (0.07, 0.53)
    assert (d1["patient_turns"], d1["final_memories"]) == (2296, 408)
    # patient-bootstrap endpoints; 0.001 covers resampling noise at the third decimal
    for key, want in (("recall", (0.674, 0.740)), ("strict_recall", (0.221, 0.305))):
        assert d1["ci"][key] == pytest.approx(want, abs=0.0015)


@pytest.mark.slow
def test_reference_dimensions_two_and_three(reference):
    _, run, _ = reference
    rep = run.report
    reported = {
        "detection": (84.4, 70.8),
        "resource_informed": (76.5, 62.6),
        "safety_recall": (86.7, 75.9),
        "severity_within1": (81.5, 67.1),
        "severity_exact": (28.0, 25.5),
        "resource_recall_mean": (65.3, 51.4),
        "resource_precision_mean": (71.2, 62.1),
    }
    for key, (iso, pipe) in reported.items():
        assert round(100 * rep.dim2[key], 1) == iso, key
        assert round(100 * rep.dim3[key], 1) == pipe, key
    assert [round(100 * x, 1) for x in rep.dim2["ci"]["detection"]] == [79.8, 88.9]
    assert [round(100 * x, 1) for x in rep.dim3["ci"]["detection"]] == [65.0, 76.5]
    assert rep.dim2["detected_count"] == 205
    assert round(rep.dim2["classification_distribution"]["contradiction"] * 205) == 29
    by_sev = {k: round(100 * v, 1) for k, v in rep.dim2["detection_by_severity"].items()}
    assert by_sev == {"low": 84.0, "medium": 83.1, "high": 86.8}


@pytest.mark.slow
def test_reference_cascade(reference):
    _, run, _ = reference
    c = run.report.cascade
    assert (len(c["lost"]), len(c["gained"])) == (39, 6)
    assert round(100 * c["delta"], 1) == -13.6
    assert (round(100 * c["ci_low"], 1), round(100 * c["ci_high"], 1)) == (-18.9, -8.6)
    shares = {k: round(100 * v / 39) for k, v in c["lost_by_severity"].items()}
    assert shares == {"low": 54, "medium": 28, "high": 18}
    assert c["lost_safety_critical"] == 10


@pytest.mark.slow
def test_reference_resource_types(reference):
    _, run, _ = reference
    cascade_rows = {
        "AllergyIntolerance": (6, 100.0, 66.7),
        "CarePlan": (60, 66.7, 58.3),
        "Condition": (121, 86.0, 74.4),
        "Immunization": (25, 100.0, 92.0),
        "MedicationRequest": (92, 89.1, 77.2),
        "Observation": (28, 82.1, 57.1),
        "Procedure": (32, 75.0, 65.6),
    }
    d3 = {r["resource_type"]: r for r in run.report.dim3["per_type"]}
    got = {
        r["resource_type"]: (r["scenarios"], round(100 * r["detection"], 1), round(100 * d3[r["resource_type"]]["detection"], 1))
        for r in run.report.dim2["per_type"]
    }
    assert got == cascade_rows


@pytest.mark.slow
def test_reference_specificity_and_correlations(reference):
    _, run, _ = reference
    spec = run.report.specificity["distribution"]
    assert (round(100 * spec["no_fhir"], 1), round(100 * spec["gap_patient"], 1)) == (83.3, 16.6)
    assert spec["contradiction"] == 0.0
    corr = run.report.correlations
    assert (round(corr["recall_vs_turns"]["r"], 2), round(corr["recall_vs_turns"]["p"], 3)) == (-0.46, 0.018)
    assert (round(corr["recall_vs_final_memories"]["r"], 2), round(corr["recall_vs_final_memories"]["p"], 3)) == (-0.48, 0.013)
    assert (round(corr["detection_vs_turns"]["r"], 2), round(corr["detection_vs_turns"]["p"], 2)) == (0.12, 0.56)
    assert (round(corr["detection_vs_final_memories"]["r"], 2), round(corr["detection_vs_final_memories"]["p"], 2)) == (0.02, 0.93)


@pytest.mark.slow
def test_reference_gt_isolation(reference):
    built, _, gw = reference
    assert gt_isolation_hits(gw.audit.entries, [s.text for s in built.summaries.values()]) == []
