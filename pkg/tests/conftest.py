from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
DEMO = Path(str(resources.files("dsrecon") / "data" / "demo"))


@pytest.fixture
def lisinopril_bundle() -> dict:
    return json.loads((FIXTURES / "lisinopril_bundle.json").read_text())


@pytest.fixture
def lisinopril_golden() -> str:
    return (FIXTURES / "lisinopril_summary.golden.txt").read_text()


@pytest.fixture(scope="session")
def small_run():
    """A scripted end-to-end run over a small random design, shared by several modules."""
    from dsrecon.pipeline import run_all
    from dsrecon.reference_corpus import materialize, small_design
    from dsrecon.synthetic import ScriptPlan, build_corpus, scripted_gateway

    blueprint = materialize(small_design(seed=7, patients=4, scenarios=3), seed=7)
    gw = scripted_gateway(ScriptPlan.from_blueprint(blueprint))
    built = build_corpus(blueprint, gw)
    run = run_all(gw, gw, gw, built.transcripts, built.scenarios, built.summaries, iterations=500)
    return blueprint, built, run, gw


@pytest.fixture(scope="session")
def reference():
    """The reference-scale scripted corpus and its full run (about a minute to build)."""
    from dsrecon.pipeline import run_all
    from dsrecon.reference_corpus import reference_blueprint
    from dsrecon.synthetic import ScriptPlan, build_corpus, scripted_gateway

    bp = reference_blueprint(seed=0)
    gw = scripted_gateway(ScriptPlan.from_blueprint(bp))
    built = build_corpus(bp, gw)
    run = run_all(gw, gw, gw, built.transcripts, built.scenarios, built.summaries, iterations=10_000)
    return built, run, gw


# -- acceptance summary ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:>2}. {title}" + (f"  ({detail})" if detail else ""))
