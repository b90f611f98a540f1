from __future__ import annotations

import math
from datetime import date, datetime
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from dsrecon.corpus import GroundTruthEvent, HybridTranscript, Session, make_turns
from dsrecon.evaluation import (
    EvalReport,
    JudgeVerdict,
    ScenarioOutcome,
    bootstrap_rate_ci,
    build_judge_event_request,
    build_judge_transcript_request,
    build_report,
    cascade,
    dim1_metrics,
    dim1_report,
    dim_metrics,
    judge_event,
    judge_transcript,
    paired_bootstrap_ci,
    pearson,
    per_type_table,
    render_report,
    score_all,
    score_scenario,
    specificity_distribution,
)
from dsrecon.llm_gateway import ScriptedFixture, ScriptedGateway, StructuredOutputError
from dsrecon.narrative_memory import MemoryDelta, MemoryStore
from dsrecon.reconciliation import ReconciliationResult

import metric_fixture as mf

TOL = 1e-12


def outcome(sid, detected, ri=False, sev=None, predicted=(), expected=(("Condition", "S", "1"),)):
    p, e = frozenset(predicted), frozenset(expected)
    return ScenarioOutcome(sid, detected, ri, sev, p & e, p, e)


# -- Dimension 1 ----------------------------------------------------------


def test_dim1_arithmetic():
    vs = [JudgeVerdict(str(i), v) for i, v in enumerate(["MATCH", "PARTIAL", "NO_MATCH", "NO_MATCH"])]
    m = dim1_metrics(vs)
    assert (m["recall"], m["strict_recall"]) == (0.5, 0.25)
    assert dim1_metrics([JudgeVerdict("a", "MATCH")])["recall"] == 1.0
    with pytest.raises(ValueError):
        dim1_metrics([])


def test_dim1_report_macro_and_pooled():
    vs = [JudgeVerdict("a", "MATCH", patient_id="p1"), JudgeVerdict("b", "NO_MATCH", patient_id="p1")]
    vs += [JudgeVerdict("c", "PARTIAL", patient_id="p2")]
    scores = {"p1": {"faithfulness": 5, "deduplication": 3}, "p2": {"faithfulness": 4, "deduplication": 4}}
    rep = dim1_report(vs, scores, {"p1": 10, "p2": 4}, {"p1": 6, "p2": 2})
    assert rep["recall"] == pytest.approx((0.5 + 1.0) / 2)
    assert rep["strict_recall"] == pytest.approx((0.5 + 0.0) / 2)
    assert rep["pooled"]["recall"] == pytest.approx(2 / 3)
    assert rep["faithfulness"] == 4.5 and rep["deduplication"] == 3.5
    assert rep["ranges"]["recall"] == {"mean": 0.75, "min": 0.5, "max": 1.0}
    assert (rep["patient_turns"], rep["final_memories"]) == (14, 8)


def _event() -> GroundTruthEvent:
    return GroundTruthEvent("e1", "s1", 1, "I'm not allergic to anything major", "Patient reports no major allergies")


def test_judge_event_scripted():
    store = MemoryStore("p")
    store.apply_delta(MemoryDelta.from_dict({"inserts": [{"content": "Patient reports no major allergies", "category": "health"}]}), "s1", "2023-01-01")
    req = build_judge_event_request(_event(), store)
    assert "- Patient reports no major allergies" in req.user_text
    assert "(no memories)" in build_judge_event_request(_event(), MemoryStore("p")).user_text
    fx = ScriptedFixture()
    fx.add(req, {"verdict": "MATCH", "content_fidelity": 5, "reasoning": "same"})
    v = judge_event(ScriptedGateway(fx), _event(), store, "p")
    assert (v.verdict, v.content_fidelity, v.patient_id) == ("MATCH", 5, "p")


def test_judge_transcript_scores_and_range():
    s = Session("p-r000", date(2023, 1, 1), make_turns([("patient", "hi")], datetime(2023, 1, 1, 9)))
    t = HybridTranscript("p", [s])
    req = build_judge_transcript_request(t, MemoryStore("p"))
    ok = {"faithfulness": {"score": 5, "reasoning": ""}, "deduplication": {"score": 5, "reasoning": ""}}
    fx = ScriptedFixture()
    fx.add(req, ok)
    assert judge_transcript(ScriptedGateway(fx), t, MemoryStore("p")) == {"faithfulness": 5, "deduplication": 5}
    bad = {"faithfulness": {"score": 6, "reasoning": ""}, "deduplication": {"score": 5, "reasoning": ""}}
    fx2 = ScriptedFixture()
    fx2.add(req, bad)
    fx2.add(req.with_nudge(), bad)
    with pytest.raises(Exception) as info:
        judge_transcript(ScriptedGateway(fx2), t, MemoryStore("p"))
    assert isinstance(info.value.__cause__, StructuredOutputError)


# -- scenario scoring -----------------------------------------------------


def test_unflagged_session():
    sc = mf.scenarios(["s02"])[0]
    o = score_scenario(sc, mf.results(["s02"]))
    assert not o.detected and not o.resource_informed


def test_sibling_citation_is_detected_but_not_resource_informed():
    sc = mf.scenarios(["s04"])[0]
    o = score_scenario(sc, mf.results(["s04"]))
    assert o.detected and not o.resource_informed


def test_display_text_never_participates():
    sc = mf.scenarios(["s10"])[0]
    assert score_scenario(sc, mf.results(["s10"])).resource_informed


def test_within_one_but_not_exact():
    sc = mf.scenarios(["s04"])[0]  # GT medium, predicted high
    m = dim_metrics([score_scenario(sc, mf.results(["s04"]))], [sc])
    assert (m["severity_exact"], m["severity_within1"]) == (0.0, 1.0)


def _check_against(expected: dict, got: dict) -> None:
    for k, v in expected.items():
        assert abs(got[k] - float(v)) <= TOL, k


def test_five_scenario_fixture():
    ids = ["s01", "s02", "s03", "s04", "s05"]
    scs = mf.scenarios(ids)
    got = dim_metrics(score_all(scs, mf.results(ids)), scs)
    _check_against(mf.FIVE_EXPECTED, got)


def test_hand_rows_add_up():
    """The per-scenario hand labels and the literal totals agree with each other."""
    rows = list(mf.HAND.values())
    n = len(rows)
    assert F_sum(r[0] for r in rows) / n == mf.DIM2_EXPECTED["detection"]
    assert F_sum(r[1] for r in rows) / n == mf.DIM2_EXPECTED["resource_informed"]
    assert F_sum(r[2] for r in rows) / n == mf.DIM2_EXPECTED["severity_exact"]
    assert F_sum(r[3] for r in rows) / n == mf.DIM2_EXPECTED["severity_within1"]
    assert F_sum(r[4] for r in rows) / n == mf.DIM2_EXPECTED["resource_recall_mean"]
    prec = [r[5] for r in rows if r[5] is not None]
    assert F_sum(prec) / len(prec) == mf.DIM2_EXPECTED["resource_precision_mean"]


def F_sum(xs):
    return sum((Fraction(x) for x in xs), Fraction(0))


def test_twenty_scenario_fixture_per_scenario():
    scs = mf.scenarios()
    outs = score_all(scs, mf.results())
    for o in outs:
        det, ri, *_ = mf.HAND[o.scenario_id]
        assert (o.detected, o.resource_informed) == (bool(det), bool(ri)), o.scenario_id


def test_twenty_scenario_fixture_dim2_and_dim3():
    scs = mf.scenarios()
    d2 = dim_metrics(score_all(scs, mf.results()), scs)
    d3 = dim_metrics(score_all(scs, mf.results(pipeline=True)), scs)
    _check_against(mf.DIM2_EXPECTED, d2)
    _check_against(mf.DIM3_EXPECTED, d3)
    assert d2["n_safety_critical"] == 8 and d2["n_precision_defined"] == 15
    assert d2["detection_by_severity"] == pytest.approx({k: float(v) for k, v in mf.DIM2_BY_SEVERITY.items()}, abs=TOL)
    assert d2["classification_distribution"] == pytest.approx({k: float(v) for k, v in mf.DIM2_CLASSES.items()}, abs=TOL)


def test_per_type_table_counts_each_type():
    scs = mf.scenarios()
    table = per_type_table(score_all(scs, mf.results()), scs)
    assert {r["resource_type"]: (r["scenarios"], r["detection"]) for r in table} == pytest.approx(
        {k: (n, float(v)) for k, (n, v) in mf.DIM2_PER_TYPE.items()}
    )
    assert sum(r["scenarios"] for r in table) == 24 > len(scs)


def test_single_type_corpus_has_one_row():
    scs = mf.scenarios(["s01", "s02"])
    assert len(per_type_table(score_all(scs, mf.results(["s01", "s02"])), scs)) == 1


def test_one_outcome_per_scenario_required():
    scs = mf.scenarios(["s01", "s02"])
    with pytest.raises(ValueError):
        dim_metrics(score_all(scs[:1], mf.results(["s01"])), scs)


# -- specificity ----------------------------------------------------------


def _r(kind: str) -> ReconciliationResult:
    return ReconciliationResult(kind, 0.5, "", "low", ())


def test_specificity_fractions():
    assert specificity_distribution([_r("no_fhir")] * 3)["no_fhir"] == 1.0
    d = specificity_distribution([_r("no_fhir")] * 5 + [_r("gap_patient")])
    assert d["no_fhir"] == pytest.approx(5 / 6) and d["gap_patient"] == pytest.approx(1 / 6)
    assert math.isclose(sum(d.values()), 1.0, abs_tol=1e-9)
    assert set(d) == {"agreement", "contradiction", "gap_patient", "no_fhir"}


# -- cascade and bootstrap ------------------------------------------------


def test_identical_outcomes_give_zero_cascade():
    outs = [outcome(f"s{i}", i % 2 == 0) for i in range(10)]
    c = cascade(outs, outs, iterations=500)
    assert c["delta"] == 0 and c["lost"] == [] and c["gained"] == []
    assert (c["ci_low"], c["ci_high"]) == (0.0, 0.0)


def test_two_lost_one_gained_of_ten():
    before = [True] * 6 + [False] * 4
    after = list(before)
    after[0] = after[1] = False
    after[9] = True
    d2 = [outcome(f"s{i}", b) for i, b in enumerate(before)]
    d3 = [outcome(f"s{i}", a) for i, a in enumerate(after)]
    c = cascade(d2, d3, iterations=2000)
    assert c["lost"] == ["s0", "s1"] and c["gained"] == ["s9"]
    assert c["delta"] == pytest.approx(-0.10, abs=TOL)
    assert c["dim3_detected"] == c["dim2_detected"] - 2 + 1
    assert c["ci_low"] <= c["delta"] <= c["ci_high"]


def test_cascade_on_twenty_fixture():
    scs = mf.scenarios()
    c = cascade(score_all(scs, mf.results()), score_all(scs, mf.results(pipeline=True)), iterations=1000)
    assert c["lost"] == ["s01", "s05"] and c["gained"] == ["s09"]
    assert c["delta"] == pytest.approx(-1 / 20, abs=TOL)


def test_mismatched_ids_rejected():
    with pytest.raises(ValueError):
        cascade([outcome("a", True)], [outcome("b", True)])


def test_bootstrap_deterministic_under_seed():
    rng = random.Random(3)
    a = [rng.random() < 0.8 for _ in range(50)]
    b = [x and rng.random() < 0.9 for x in a]
    assert paired_bootstrap_ci(a, b, seed=5, iterations=3000) == paired_bootstrap_ci(a, b, seed=5, iterations=3000)
    clusters = [f"p{i % 7}" for i in range(50)]
    lo, hi = paired_bootstrap_ci(a, b, seed=5, iterations=3000, clusters=clusters)
    delta = np.mean(b) - np.mean(a)
    assert lo <= delta <= hi


def test_cluster_bootstrap_with_singleton_clusters_matches_scenario_bootstrap():
    """With one scenario per cluster the two resampling schemes draw identical indices."""
    rng = random.Random(9)
    a = [rng.random() < 0.7 for _ in range(30)]
    b = [rng.random() < 0.6 for _ in range(30)]
    labels = [f"c{i:02d}" for i in range(30)]
    assert paired_bootstrap_ci(a, b, 1, 2000) == pytest.approx(paired_bootstrap_ci(a, b, 1, 2000, labels), abs=TOL)


def test_rate_ci_brackets_mean():
    xs = [True] * 30 + [False] * 10
    lo, hi = bootstrap_rate_ci(xs, iterations=2000)
    assert lo <= 0.75 <= hi


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_cascade_identity_property(pairs):
    d2 = [outcome(f"s{i}", a) for i, (a, _) in enumerate(pairs)]
    d3 = [outcome(f"s{i}", b) for i, (_, b) in enumerate(pairs)]
    c = cascade(d2, d3, iterations=200)
    assert c["dim3_detected"] == c["dim2_detected"] - len(c["lost"]) + len(c["gained"])


# -- Pearson --------------------------------------------------------------


def _fixture26():
    rng = random.Random(26)
    x = [rng.randint(20, 200) for _ in range(26)]
    y = [0.9 - 0.002 * v + rng.gauss(0, 0.08) for v in x]
    return x, y


def test_pearson_exact_lines():
    x = list(range(1, 27))
    assert pearson(x, x)["r"] == 1.0
    assert pearson(x, [-v for v in x])["r"] == -1.0


def test_pearson_matches_scipy_and_numpy():
    x, y = _fixture26()
    ours = pearson(x, y)
    ref = stats.pearsonr(x, y)
    assert abs(ours["r"] - ref.statistic) < 1e-9
    assert abs(ours["r"] - np.corrcoef(x, y)[0, 1]) < 1e-9
    assert abs(ours["p"] - ref.pvalue) < 1e-9


def test_pearson_rejects_degenerate_input():
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [4, 4, 4])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])


# -- report ---------------------------------------------------------------


def test_report_from_fixture_renders_and_checks_identity():
    scs = mf.scenarios()
    d2 = score_all(scs, mf.results())
    d3 = score_all(scs, mf.results(pipeline=True))
    vs = [JudgeVerdict(f"e{i}", "MATCH" if i % 3 else "PARTIAL", patient_id=f"P{i % 4}") for i in range(12)]
    dim1 = dim1_report(vs, {f"P{i}": {"faithfulness": 5, "deduplication": 4} for i in range(4)}, {f"P{i}": 10 + 7 * i for i in range(4)}, {f"P{i}": 3 + i for i in range(4)})
    rep = build_report(dim1, scs, d2, d3, [_r("no_fhir")] * 5 + [_r("gap_patient")], iterations=500)
    assert rep.cascade["delta"] == pytest.approx(rep.dim3["detection"] - rep.dim2["detection"], abs=TOL)
    text = render_report(rep)
    assert "Detection rate" in text and "80.0%" in text and "75.0%" in text
    again = build_report(dim1, scs, d2, d3, [_r("no_fhir")] * 5 + [_r("gap_patient")], iterations=500)
    assert again.to_dict() == rep.to_dict()


def test_report_rejects_inconsistent_delta():
    scs = mf.scenarios()
    d2 = dim_metrics(score_all(scs, mf.results()), scs)
    with pytest.raises(ValueError):
        EvalReport({}, d2, d2, {"delta": -0.5}, {})
