"""Build the reference-scale scripted corpus, run every dimension, and compare.

The corpus has 26 patients, 432 real sessions and 243 scenario sessions.
Every model call is answered by the scripted responder, so the run is
deterministic and needs no network. The design search takes about a
minute; ``--design`` caches it as a pickle for later runs.

    python3 scripts/run_reference_corpus.py [--seed 0] [--unit scenario|patient] [--design PATH]
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
import time
from pathlib import Path

from dsrecon.evaluation import EvalReport, render_report
from dsrecon.pipeline import run_all
from dsrecon.reference_corpus import design, materialize
from dsrecon.synthetic import ScriptPlan, build_corpus, scripted_gateway

# Reported figures: (label, getter over the report dict, value, decimals)
REPORTED = (
    ("Dim1 recall", lambda r: r["dim1"]["recall"], 0.708, 3),
    ("Dim1 strict recall", lambda r: r["dim1"]["strict_recall"], 0.262, 3),
    ("Dim1 faithfulness", lambda r: r["dim1"]["faithfulness"], 4.8, 1),
    ("Dim1 deduplication", lambda r: r["dim1"]["deduplication"], 3.6, 1),
    ("Patient turns", lambda r: r["dim1"]["patient_turns"], 2296, 0),
    ("Final memories", lambda r: r["dim1"]["final_memories"], 408, 0),
    ("Isolated detection %", lambda r: 100 * r["dim2"]["detection"], 84.4, 1),
    ("Pipeline detection %", lambda r: 100 * r["dim3"]["detection"], 70.8, 1),
    ("Isolated resource-informed %", lambda r: 100 * r["dim2"]["resource_informed"], 76.5, 1),
    ("Pipeline resource-informed %", lambda r: 100 * r["dim3"]["resource_informed"], 62.6, 1),
    ("Isolated safety recall %", lambda r: 100 * r["dim2"]["safety_recall"], 86.7, 1),
    ("Pipeline safety recall %", lambda r: 100 * r["dim3"]["safety_recall"], 75.9, 1),
    ("Isolated severity within-1 %", lambda r: 100 * r["dim2"]["severity_within1"], 81.5, 1),
    ("Pipeline severity within-1 %", lambda r: 100 * r["dim3"]["severity_within1"], 67.1, 1),
    ("Isolated severity exact %", lambda r: 100 * r["dim2"]["severity_exact"], 28.0, 1),
    ("Pipeline severity exact %", lambda r: 100 * r["dim3"]["severity_exact"], 25.5, 1),
    ("Isolated resource recall %", lambda r: 100 * r["dim2"]["resource_recall_mean"], 65.3, 1),
    ("Pipeline resource recall %", lambda r: 100 * r["dim3"]["resource_recall_mean"], 51.4, 1),
    ("Isolated resource precision %", lambda r: 100 * r["dim2"]["resource_precision_mean"], 71.2, 1),
    ("Pipeline resource precision %", lambda r: 100 * r["dim3"]["resource_precision_mean"], 62.1, 1),
    ("Cascade delta %", lambda r: 100 * r["cascade"]["delta"], -13.6, 1),
    ("Detections lost", lambda r: len(r["cascade"]["lost"]), 39, 0),
    ("Specificity no_fhir %", lambda r: 100 * r["specificity"]["distribution"]["no_fhir"], 83.3, 1),
    ("Specificity gap_patient %", lambda r: 100 * r["specificity"]["distribution"]["gap_patient"], 16.6, 1),
    ("Specificity contradiction %", lambda r: 100 * r["specificity"]["distribution"]["contradiction"], 0.0, 1),
    ("r(recall, turns)", lambda r: r["correlations"]["recall_vs_turns"]["r"], -0.46, 2),
    ("r(recall, final memories)", lambda r: r["correlations"]["recall_vs_final_memories"]["r"], -0.48, 2),
    ("r(detection, turns)", lambda r: r["correlations"]["detection_vs_turns"]["r"], 0.12, 2),
    ("r(detection, final memories)", lambda r: r["correlations"]["detection_vs_final_memories"]["r"], 0.02, 2),
)


def compare(report: dict) -> list[tuple[str, str, str, bool]]:
    rows = []
    for label, get, want, nd in REPORTED:
        got = get(report)
        rows.append((label, f"{got:.{nd}f}", f"{want:.{nd}f}", round(got, nd) == round(want, nd)))
    return rows


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--unit", choices=("scenario", "patient"), default="scenario")
    ap.add_argument("--iterations", type=int, default=10_000)
    ap.add_argument("--design", type=Path, help="pickle cache for the design search")
    ap.add_argument("--json", type=Path, help="also write the report as JSON")
    args = ap.parse_args()

    t0 = time.perf_counter()
    if args.design and args.design.exists():
        d = pickle.loads(args.design.read_bytes())
    else:
        d = design(seed=args.seed)
        if args.design:
            args.design.write_bytes(pickle.dumps(d))
    blueprint = materialize(d, args.seed)
    gw = scripted_gateway(ScriptPlan.from_blueprint(blueprint))
    built = build_corpus(blueprint, gw)
    run = run_all(
        gw, gw, gw, built.transcripts, built.scenarios, built.summaries,
        seed=args.seed, iterations=args.iterations, bootstrap_unit=args.unit,
    )
    elapsed = time.perf_counter() - t0
    report = json.loads(json.dumps(run.report.to_dict()))
    if args.json:
        args.json.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

    print(render_report(EvalReport(**report)))
    print(f"\nREPORTED FIGURES ({elapsed:.0f}s, {len(gw.audit)} scripted calls, {len(run.failures)} failures)")
    print(f"  {'Figure':<32} {'Run':>9} {'Reported':>9}")
    rows = compare(report)
    for label, got, want, ok in rows:
        print(f"  {label:<32} {got:>9} {want:>9}  {'ok' if ok else 'DIFF'}")
    return 0 if all(ok for *_, ok in rows) and not run.failures else 1


if __name__ == "__main__":
    sys.exit(main())
