"""Write the shipped demo corpus and its scripted fixture.

The demo is a small random design (three patients, five sessions each).
Every model call of a full run is recorded, so the CLI can replay the whole
pipeline offline from ``fixture.json``.

    python3 scripts/build_demo_corpus.py [--out src/dsrecon/data/demo] [--seed 0]
"""

from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

from dsrecon.catalog import to_bundle
from dsrecon.evaluation import render_report
from dsrecon.llm_gateway import AuditLog, ScriptedFixture
from dsrecon.pipeline import run_all
from dsrecon.reference_corpus import materialize, small_design
from dsrecon.synthetic import ScriptPlan, build_corpus, scripted_gateway

CONFIG = {
    "paths": {
        "bundles": "bundles",
        "messages": "messages",
        "scenarios": "scenarios.json",
        "out": "out",
    },
    "mode": "scripted",
    "fixture": "fixture.json",
    "workers": 1,
    "seed": 0,
    "iterations": 2000,
    "bootstrap_unit": "scenario",
    "budget": [1100, 1600],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/dsrecon/data/demo"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    if out.exists():
        shutil.rmtree(out)
    (out / "bundles").mkdir(parents=True)
    (out / "messages").mkdir()

    blueprint = materialize(small_design(args.seed), args.seed)
    audit = AuditLog()
    gw = scripted_gateway(ScriptPlan.from_blueprint(blueprint), audit)
    built = build_corpus(blueprint, gw)
    run = run_all(gw, gw, gw, built.transcripts, built.scenarios, built.summaries, iterations=CONFIG["iterations"])

    for p in blueprint.patients:
        pid = p.patient_id
        (out / "bundles" / f"{pid}.json").write_text(json.dumps(to_bundle(p.record), indent=1) + "\n")
        lines = [
            json.dumps({"speaker": m.speaker, "text": m.text, "timestamp": m.timestamp.isoformat()})
            for m in built.messages[pid]
        ]
        (out / "messages" / f"{pid}.jsonl").write_text("".join(line + "\n" for line in lines))
    scenarios = [{**sp.scenario.to_dict(), "anchor": sp.anchor} for p in blueprint.patients for sp in p.scenarios]
    (out / "scenarios.json").write_text(json.dumps(scenarios, indent=1) + "\n")
    ScriptedFixture.from_audit(audit.entries).save(out / "fixture.json")
    (out / "config.json").write_text(json.dumps(CONFIG, indent=1) + "\n")
    (out / "expected_report.txt").write_text(render_report(run.report))
    print(f"wrote {out} ({len(blueprint.patients)} patients, {len(built.scenarios)} scenarios, {len(audit)} calls)")


if __name__ == "__main__":
    main()
