from __future__ import annotations

import json
import shutil
from datetime import datetime
from pathlib import Path

import pytest

from dsrecon.cli import EXIT_CONFIG, EXIT_DATA, EXIT_GATEWAY, RunConfig, main
from dsrecon.corpus import read_transcripts
from dsrecon.dataset import gt_isolation_hits, session_boundaries
from dsrecon.reconciliation import read_results

from conftest import DEMO
from segmentation_oracle import oracle_boundaries

STEPS = (
    ["curate"],
    ["segment"],
    ["build-hybrid"],
    ["replay"],
    ["reconcile", "--isolated"],
    ["reconcile", "--pipeline"],
    ["evaluate"],
    ["report"],
)


def run_demo(out: Path, config: Path = DEMO / "config.json") -> list[int]:
    return [main([*step, "--config", str(config), "--out", str(out)]) for step in STEPS]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def demo_out(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("demo")
    assert run_demo(out) == [0] * len(STEPS)
    return out


def test_demo_report_matches_shipped_expectation(demo_out):
    assert (demo_out / "report.txt").read_text() == (DEMO / "expected_report.txt").read_text()


def test_end_to_end_is_byte_reproducible(demo_out, tmp_path):
    assert run_demo(tmp_path) == [0] * len(STEPS)
    assert tree(tmp_path) == tree(demo_out)


def test_commands_are_idempotent(demo_out, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(demo_out, copy)
    assert run_demo(copy) == [0] * len(STEPS)
    assert tree(copy) == tree(demo_out)


def test_segment_boundaries_match_oracle(demo_out):
    messages = {f.stem: [json.loads(x) for x in f.read_text().splitlines() if x.strip()] for f in (DEMO / "messages").glob("*.jsonl")}
    for t in read_transcripts(demo_out / "sessions.jsonl"):
        times = sorted(datetime.fromisoformat(m["timestamp"]) for m in messages[t.patient_id])
        assert session_boundaries(t.sessions) == oracle_boundaries(times)


def test_isolated_gives_one_result_per_gt_memory(demo_out):
    transcripts = read_transcripts(demo_out / "transcripts.jsonl")
    gt = [(s.session_id, e.event_id) for t in transcripts for s in t.sessions if s.kind == "synthetic" for e in s.gt_events]
    got = [(r.session_id, r.memory_id) for r in read_results(demo_out / "isolated.jsonl")]
    assert got == gt


def test_pipeline_consumes_the_trace_changed_sets(demo_out):
    changed = []
    for line in (demo_out / "trace.jsonl").read_text().splitlines():
        d = json.loads(line)
        if d["type"] == "turn":
            changed += [(d["session_id"], m["memory_id"]) for m in d["report"]["changed"]]
    got = [(r.session_id, r.memory_id) for r in read_results(demo_out / "pipeline.jsonl")]
    assert got == changed


def test_evaluate_report_cascade_identity(demo_out):
    rep = json.loads((demo_out / "report.json").read_text())
    c = rep["cascade"]
    assert c["identity_holds"]
    assert c["dim3_detected"] == c["dim2_detected"] - len(c["lost"]) + len(c["gained"])
    assert c["delta"] == pytest.approx(rep["dim3"]["detection"] - rep["dim2"]["detection"], abs=1e-12)


def test_gt_requests_never_see_summaries(demo_out):
    entries = [json.loads(x) for x in (demo_out / "audit" / "build-hybrid.jsonl").read_text().splitlines()]
    summaries = [p.read_text() for p in (demo_out / "summaries").glob("*.txt")]
    assert any(e["request"]["schema_id"] == "gt_events" for e in entries)
    assert gt_isolation_hits(entries, summaries) == []


# -- failures map onto exit codes -----------------------------------------


def _config(tmp_path: Path, **over) -> Path:
    d = json.loads((DEMO / "config.json").read_text())
    d["fixture"] = str(DEMO / d["fixture"])
    d["paths"] = {k: str(DEMO / v) for k, v in d["paths"].items()}
    d.update(over)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(d))
    return p


def test_config_errors_exit_2(tmp_path):
    assert main(["curate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["curate", "--config", str(_config(tmp_path, surprise=1))]) == EXIT_CONFIG
    assert main(["curate", "--config", str(_config(tmp_path, mode="scripted", fixture=""))]) == EXIT_CONFIG
    assert main(["curate", "--config", str(_config(tmp_path, budget=[1600, 1100]))]) == EXIT_CONFIG


def test_live_mode_without_key_exits_2(tmp_path, demo_out, monkeypatch):
    monkeypatch.delenv("DSRECON_API_KEY", raising=False)
    out = tmp_path / "o"
    shutil.copytree(demo_out, out)
    assert main(["replay", "--config", str(_config(tmp_path)), "--out", str(out), "--mode", "live"]) == EXIT_CONFIG


def test_missing_inputs_exit_3(tmp_path):
    cfg = _config(tmp_path)
    assert main(["replay", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == EXIT_DATA
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == EXIT_DATA


def test_fixture_miss_exits_4(tmp_path, demo_out):
    empty = tmp_path / "empty_fixture.json"
    empty.write_text(json.dumps({"fallback": "error", "responses": {}}))
    out = tmp_path / "o"
    shutil.copytree(demo_out, out)
    cfg = _config(tmp_path, fixture=str(empty))
    assert main(["replay", "--config", str(cfg), "--out", str(out)]) == EXIT_GATEWAY
    d = json.loads((out / "dim1.json").read_text())
    assert d["failures"]


def test_config_relative_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"fixture": "f.json", "paths": {"bundles": "b"}}))
    cfg = RunConfig.load(tmp_path / "c.json")
    assert cfg.fixture == str(tmp_path / "f.json") and cfg.paths.bundles == str(tmp_path / "b")
