"""One test per acceptance criterion.

Each test records PASS, FAIL or SKIP in ``conftest.ACCEPTANCE``; the
terminal summary prints one line per criterion after the run.
"""

from __future__ import annotations

import functools
import json
import os
import random
import time
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

import conftest
import metric_fixture as mf
from conftest import DEMO, FIXTURES
from memory_oracle import ModelStore, random_delta
from segmentation_oracle import oracle_boundaries

from dsrecon.dataset import Message, gt_isolation_hits, segment_messages, session_boundaries
from dsrecon.evaluation import build_report, cascade, dim1_report, dim_metrics, pearson, score_all
from dsrecon.fhir_ingest import curate, lookup, parse_bundle, render_summary
from dsrecon.narrative_memory import MemoryDelta, MemoryRecord, MemoryStore, normalize
from dsrecon.reconciliation import parse_result

from test_llm_gateway import WORKED_RESULT
from test_reference_corpus import discrepancy_free_run


def criterion(n: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except pytest.skip.Exception as exc:
                conftest.ACCEPTANCE[n] = ("SKIP", title, str(exc))
                raise
            except BaseException as exc:
                conftest.ACCEPTANCE[n] = ("FAIL", title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
                raise
            conftest.ACCEPTANCE[n] = ("PASS", title, detail or "")

        return run

    return wrap


@criterion(1, "summary rendering equals the frozen golden transcription byte for byte")
def test_c01_summary_golden():
    bundle = json.loads((FIXTURES / "lisinopril_bundle.json").read_text())
    golden = (FIXTURES / "lisinopril_summary.golden.txt").read_text()
    assert render_summary(curate(parse_bundle(bundle))) == golden
    return f"{len(golden)} bytes"


@criterion(2, "sample reconciliation JSON parses with gap_patient, 0.95, medium and 2 resolvable refs")
def test_c02_schema_fidelity():
    from dsrecon.schemas import validate

    stream = parse_bundle(json.loads((FIXTURES / "lisinopril_bundle.json").read_text()), "p1")
    memory = MemoryRecord("mem_001", "Patient reports a recurring sinus issue", "health", "2019-08-21", "2019-08-21", "s")
    r = parse_result(validate("reconciliation_result", json.dumps(WORKED_RESULT)), memory, stream)
    assert (r.contradiction_type, r.confidence, r.clinical_severity) == ("gap_patient", 0.95, "medium")
    assert len(r.fhir_resources_considered) == 2
    assert all(lookup(stream, ref) is not None for ref in r.fhir_resources_considered)
    assert r.cited_unknown == ()


@criterion(3, "segmentation equals the brute-force oracle on 1,000 random streams in under 5 s")
def test_c03_segmentation_oracle():
    rng = random.Random(3)
    t0 = datetime(2023, 3, 1, 8)
    streams = []
    for _ in range(1000):
        t, times = 0.0, []
        for _ in range(rng.randint(1, 80)):
            t += rng.choice([rng.uniform(0, 4.5), rng.uniform(0, 1.5), 4.0, rng.uniform(3, 30)])
            times.append(t0 + timedelta(hours=t))
        streams.append(times)
    start = time.perf_counter()
    agree = sum(
        session_boundaries(segment_messages([Message("patient", "x", ts) for ts in times])) == oracle_boundaries(times)
        for times in streams
    )
    elapsed = time.perf_counter() - start
    assert agree == 1000, f"{1000 - agree} disagreements"
    assert elapsed < 5.0
    return f"1000/1000 agree, {elapsed:.2f}s"


@criterion(4, "memory store keeps unique contents, never reuses ids, and reports sound changed sets over 10,000 sequences")
def test_c04_memory_properties():
    rng = random.Random(4)
    dupes = reuse = unsound = oracle_mismatch = 0
    for _ in range(10_000):
        store, model, seen = MemoryStore("p"), ModelStore(), set()
        for step in range(rng.randint(1, 6)):
            raw = random_delta(rng, [r.memory_id for r in store.records()], model.counter + 1)
            delta = MemoryDelta.from_dict(raw)
            before = {r.memory_id for r in store.records()}
            report = store.apply_delta(delta, f"s{step}", f"2023-01-{step + 1:02d}")
            expected_changed = model.apply(
                [(i["content"], i["category"]) for i in raw["inserts"]],
                [(u["memory_id"], u["new_content"], u["category"]) for u in raw["updates"]],
                [d["memory_id"] for d in raw["deletes"]],
            )
            records = store.records()
            norms = [normalize(r.content) for r in records]
            dupes += len(norms) != len(set(norms))
            fresh = {r.memory_id for r in records} - before
            reuse += bool(fresh & seen)
            seen |= {r.memory_id for r in records}
            live = {r.memory_id: r for r in records}
            unsound += any(live.get(m.memory_id) != m for m in report.changed)
            unsound += any(mid not in {m.memory_id for m in report.changed} for mid in fresh)
            oracle_mismatch += [m.memory_id for m in report.changed] != expected_changed
    assert (dupes, reuse, unsound, oracle_mismatch) == (0, 0, 0, 0)
    return "0 duplicates, 0 reused ids, 0 unsound changed sets"


@criterion(5, "Dim2/Dim3 metrics equal hand-enumerated values on the 20-scenario fixture to 1e-12")
def test_c05_metric_oracle():
    scs = mf.scenarios()
    for pipeline, expected in ((False, mf.DIM2_EXPECTED), (True, mf.DIM3_EXPECTED)):
        got = dim_metrics(score_all(scs, mf.results(pipeline=pipeline)), scs)
        for key, value in expected.items():
            assert abs(got[key] - float(value)) <= 1e-12, (pipeline, key, got[key], value)
    return "14 values"


@criterion(6, "cascade accounting identity holds and the seeded bootstrap CI repeats exactly")
def test_c06_cascade_accounting(small_run, reference):
    runs = []
    for built, run in ((small_run[1], small_run[2]), (reference[0], reference[1])):
        c = run.report.cascade
        assert c["dim3_detected"] == c["dim2_detected"] - len(c["lost"]) + len(c["gained"])
        runs.append((built, run))
    built, run = runs[1]
    dim1 = run.dim1.report(built.transcripts)
    scs = built.scenarios
    d2, d3 = score_all(scs, run.isolated), score_all(scs, run.coupled)
    first = cascade(d2, d3, seed=0, iterations=10_000)
    second = cascade(d2, d3, seed=0, iterations=10_000)
    assert (first["ci_low"], first["ci_high"]) == (second["ci_low"], second["ci_high"])
    a = build_report(dim1, scs, d2, d3, [], 0, 2000)
    b = build_report(dim1, scs, d2, d3, [], 0, 2000)
    assert a.cascade == b.cascade
    return f"CI [{100 * first['ci_low']:.1f}%, {100 * first['ci_high']:.1f}%] twice"


@criterion(7, "discrepancy-free 50-session real corpus yields contradiction fraction exactly 0")
def test_c07_specificity_sanity():
    from dsrecon.evaluation import specificity_distribution

    built, results, failures = discrepancy_free_run()
    assert sum(len(t.sessions) for t in built.transcripts) == 50 and not failures
    spec = specificity_distribution(results)
    assert spec["contradiction"] == 0.0
    return f"{len(results)} results, contradiction 0"


@criterion(8, "no ground-truth extraction request contains any clinical summary line")
def test_c08_gt_isolation(reference):
    built, _, gw = reference
    gt_calls = sum(1 for e in gw.audit.entries if e["request"]["schema_id"] == "gt_events")
    assert gt_calls > 0
    hits = gt_isolation_hits(gw.audit.entries, [s.text for s in built.summaries.values()])
    assert hits == []
    return f"{gt_calls} requests, 0 hits"


@criterion(9, "Pearson r matches a second computation to 1e-9 and is exactly +-1 on y = +-x")
def test_c09_pearson():
    rng = random.Random(9)
    x = [float(rng.randint(20, 200)) for _ in range(26)]
    y = [0.9 - 0.002 * v + rng.gauss(0, 0.08) for v in x]
    r = pearson(x, y)["r"]
    assert abs(r - stats.pearsonr(x, y).statistic) < 1e-9
    assert abs(r - float(np.corrcoef(x, y)[0, 1])) < 1e-9
    assert pearson(x, x)["r"] == 1.0
    assert pearson(x, [-v for v in x])["r"] == -1.0
    return f"r = {r:.6f}"


@pytest.mark.live
@criterion(10, "live smoke: one demo patient end to end against an OpenAI-compatible endpoint")
def test_c10_live_smoke(tmp_path):
    url = os.environ.get("DSRECON_LIVE_URL")
    if not url:
        pytest.skip("DSRECON_LIVE_URL not set")
    from dsrecon.cli import main
    from dsrecon.corpus import read_scenarios, read_transcripts
    from dsrecon.llm_gateway import AuditLog, GatewayConfig, LiveGateway
    from dsrecon.pipeline import load_bundles, prepare_summaries, run_all

    cfg = str(DEMO / "config.json")
    for step in (["curate"], ["segment"], ["build-hybrid"]):
        assert main([*step, "--config", cfg, "--out", str(tmp_path)]) == 0
    transcripts = [t for t in read_transcripts(tmp_path / "transcripts.jsonl")][:1]
    pid = transcripts[0].patient_id
    assert len(transcripts[0].sessions) <= 5
    scenarios = [s for s in read_scenarios(tmp_path / "scenarios.json") if s.patient_id == pid]
    budget = tuple(json.loads((DEMO / "config.json").read_text())["budget"])
    summaries = prepare_summaries({pid: load_bundles(DEMO / "bundles")[pid]}, budget)
    gw = LiveGateway(GatewayConfig(endpoint_url=url, model_name=os.environ.get("DSRECON_LIVE_MODEL", "gpt-4o")), audit=AuditLog())
    run = run_all(gw, gw, gw, transcripts, scenarios, summaries, iterations=1000)
    assert run.failures == [] and run.dim1.failures == {}
    assert set(run.report.to_dict()) >= {"dim1", "dim2", "dim3", "cascade", "correlations"}
    return f"{len(gw.audit)} live calls"
