"""Command-line harness over file-based corpora.

Every command reads a JSON :class:`RunConfig` and writes its outputs under
the configured output directory::

    curate          bundles/*.json          -> summaries/<pid>.txt, summaries.json
    segment         messages/<pid>.jsonl    -> sessions.jsonl
    build-hybrid    sessions + scenarios    -> transcripts.jsonl, scenarios.json
    replay          transcripts             -> trace.jsonl, dim1.json
    reconcile       --isolated              -> isolated.jsonl
                    --pipeline  trace.jsonl -> pipeline.jsonl
    evaluate        all of the above        -> report.json
    report          report.json             -> report.txt (also printed)

Exit codes: 0 success, 2 config error, 3 data error, 4 gateway error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .corpus import HybridTranscript, Scenario, read_scenarios, read_transcripts, write_scenarios, write_transcripts
from .dataset import (
    Message,
    annotate,
    assign_synthetic_dates,
    build_hybrid_transcript,
    generate_scenario_session,
    segment_messages,
)
from .evaluation import EvalReport, render_report
from .extraction import read_trace, write_trace
from .fhir_ingest import DEFAULT_BUDGET, CuratedSummary, render_summary
from .llm_gateway import (
    AuditLog,
    Gateway,
    GatewayConfig,
    GatewayConfigError,
    GatewayError,
    LiveGateway,
    ScriptedFixture,
    ScriptedGateway,
)
from .pipeline import (
    bind_scenarios,
    evaluate,
    load_bundles,
    prepare_summaries,
    reconcile_isolated,
    reconcile_pipeline,
    run_dim1,
)
from .reconciliation import ReconciliationFailure, read_results, write_results

logger = logging.getLogger("dsrecon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GATEWAY = 0, 2, 3, 4
STAGES = ("extraction", "reconciliation", "judge", "generation")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Paths:
    bundles: str = "bundles"
    messages: str = "messages"
    scenarios: str = "scenarios.json"
    transcripts: str = ""  # empty: use <out>/transcripts.jsonl
    out: str = "out"


@dataclass
class RunConfig:
    """Canonical JSON config. Relative paths resolve against the config file's directory."""

    paths: Paths = field(default_factory=Paths)
    mode: str = "scripted"
    fixture: str = ""
    gateways: dict[str, GatewayConfig] = field(default_factory=dict)
    workers: int = 1
    seed: int = 0
    iterations: int = 10_000
    bootstrap_unit: str = "scenario"
    budget: tuple[int, int] = DEFAULT_BUDGET
    granularity: str = "turn"
    style_exemplars: int = 3

    def validate(self) -> None:
        if self.mode not in ("scripted", "live"):
            raise ConfigError(f"mode must be 'scripted' or 'live', not {self.mode!r}")
        if self.mode == "scripted" and not self.fixture:
            raise ConfigError("scripted mode requires a fixture path")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.bootstrap_unit not in ("scenario", "patient"):
            raise ConfigError("bootstrap_unit must be 'scenario' or 'patient'")
        if self.granularity not in ("turn", "session"):
            raise ConfigError("granularity must be 'turn' or 'session'")
        lo, hi = self.budget
        if not 0 < lo <= hi:
            raise ConfigError("budget must be [min, max] with 0 < min <= max")
        unknown = set(self.gateways) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown gateway stages: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict[str, Any], base: Path = Path(".")) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            raw_paths = dict(d.get("paths", {}))
            bad = set(raw_paths) - {f.name for f in fields(Paths)}
            if bad:
                raise ConfigError(f"unknown path keys: {sorted(bad)}")
            paths = Paths(**raw_paths)
            for f in fields(Paths):
                if getattr(paths, f.name):
                    setattr(paths, f.name, str(base / getattr(paths, f.name)))
            cfg = cls(
                paths=paths,
                mode=d.get("mode", "scripted"),
                fixture=str(base / d["fixture"]) if d.get("fixture") else "",
                gateways={k: GatewayConfig.from_dict(v) for k, v in d.get("gateways", {}).items()},
                workers=int(d.get("workers", 1)),
                seed=int(d.get("seed", 0)),
                iterations=int(d.get("iterations", 10_000)),
                bootstrap_unit=d.get("bootstrap_unit", "scenario"),
                budget=tuple(d.get("budget", DEFAULT_BUDGET)),
                granularity=d.get("granularity", "turn"),
                style_exemplars=int(d.get("style_exemplars", 3)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d, path.parent)

    @property
    def out(self) -> Path:
        return Path(self.paths.out)

    @property
    def transcripts_path(self) -> Path:
        return Path(self.paths.transcripts) if self.paths.transcripts else self.out / "transcripts.jsonl"


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


def _dump(path: Path, value: Any) -> None:
    path.write_text(json.dumps(value, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


class Gateways:
    """Per-stage gateways sharing one audit log."""

    def __init__(self, cfg: RunConfig) -> None:
        self.audit = AuditLog()
        self._cfg = cfg
        self._shared: Gateway | None = None
        self._live: dict[str, Gateway] = {}
        if cfg.mode == "scripted":
            fixture = Path(cfg.fixture)
            if not fixture.exists():
                raise ConfigError(f"fixture not found: {fixture}")
            try:
                self._shared = ScriptedGateway(ScriptedFixture.load(fixture), audit=self.audit)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"invalid fixture {fixture}: {exc}") from exc

    def __getitem__(self, stage: str) -> Gateway:
        if self._shared is not None:
            return self._shared
        if stage not in self._live:
            self._live[stage] = LiveGateway(self._cfg.gateways.get(stage, GatewayConfig()), audit=self.audit)
        return self._live[stage]

    def write_audit(self, out: Path, command: str) -> None:
        if len(self.audit):
            (out / "audit").mkdir(parents=True, exist_ok=True)
            self.audit.write_jsonl(out / "audit" / f"{command}.jsonl")


def _summaries(cfg: RunConfig) -> dict[str, CuratedSummary]:
    bundles = load_bundles(_need(Path(cfg.paths.bundles), "bundles directory"))
    if not bundles:
        raise DataError(f"no bundles in {cfg.paths.bundles}")
    return prepare_summaries(bundles, cfg.budget)


def _transcripts(cfg: RunConfig) -> list[HybridTranscript]:
    return read_transcripts(_need(cfg.transcripts_path, "transcripts"))


def _scenarios(cfg: RunConfig) -> list[Scenario]:
    bound = cfg.out / "scenarios.json"
    return read_scenarios(bound if bound.exists() else _need(Path(cfg.paths.scenarios), "scenarios file"))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_curate(cfg: RunConfig, args: argparse.Namespace) -> int:
    summaries = _summaries(cfg)
    folder = cfg.out / "summaries"
    folder.mkdir(parents=True, exist_ok=True)
    index = {}
    for pid, s in summaries.items():
        (folder / f"{pid}.txt").write_text(render_summary(s), encoding="utf-8")
        index[pid] = {"estimated_tokens": s.estimated_tokens, "included": [r.to_dict() for r in s.included]}
    _dump(cfg.out / "summaries.json", index)
    return EXIT_OK


def read_messages(folder: Path) -> dict[str, list[Message]]:
    out = {}
    for f in sorted(folder.glob("*.jsonl")):
        with f.open(encoding="utf-8") as fh:
            msgs = [Message.from_dict(json.loads(line)) for line in fh if line.strip()]
        out[f.stem] = sorted(msgs, key=lambda m: m.timestamp)
    return out


def cmd_segment(cfg: RunConfig, args: argparse.Namespace) -> int:
    logs = read_messages(_need(Path(cfg.paths.messages), "messages directory"))
    if not logs:
        raise DataError(f"no message logs in {cfg.paths.messages}")
    transcripts = [HybridTranscript(pid, segment_messages(msgs, pid)) for pid, msgs in logs.items()]
    write_transcripts(cfg.out / "sessions.jsonl", transcripts)
    return EXIT_OK


def _read_anchored_scenarios(path: Path) -> list[tuple[Scenario, int | None]]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    return [(Scenario.from_dict(d), d.get("anchor")) for d in raw]


def cmd_build_hybrid(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Two-call generation for every scenario, GT annotation of real sessions, then interleaving."""
    summaries = _summaries(cfg)
    real = {t.patient_id: t.sessions for t in read_transcripts(_need(cfg.out / "sessions.jsonl", "segmented sessions"))}
    anchored = _read_anchored_scenarios(_need(Path(cfg.paths.scenarios), "scenarios file"))
    gws = Gateways(cfg)
    gw = gws["generation"]
    transcripts, scenarios = [], []
    try:
        for pid in sorted(real):
            sessions = real[pid]
            if pid not in summaries:
                raise DataError(f"no bundle for patient {pid}")
            mine = [(s, a) for s, a in anchored if s.patient_id == pid]
            n = len(sessions)
            anchors = [a if a is not None else (i * n) // max(1, len(mine)) for i, (_, a) in enumerate(mine)]
            dates = assign_synthetic_dates(sessions, anchors)
            exemplars = [t.text for s in sessions for t in s.turns if t.speaker == "patient"][: cfg.style_exemplars]
            synthetic = []
            for (sc, _), when in zip(mine, dates):
                session = generate_scenario_session(gw, sc, summaries[pid], exemplars, when)
                synthetic.append(annotate(gw, session))
                scenarios.append(sc)
            annotated = [annotate(gw, s) for s in sessions]
            transcripts.append(build_hybrid_transcript(pid, annotated, synthetic))
    finally:
        gws.write_audit(cfg.out, "build-hybrid")
    write_transcripts(cfg.out / "transcripts.jsonl", transcripts)
    write_scenarios(cfg.out / "scenarios.json", bind_scenarios(scenarios, transcripts))
    return EXIT_OK


def cmd_replay(cfg: RunConfig, args: argparse.Namespace) -> int:
    transcripts = _transcripts(cfg)
    gws = Gateways(cfg)
    try:
        run = run_dim1(gws["extraction"], gws["judge"], transcripts, cfg.workers, cfg.granularity)
    finally:
        gws.write_audit(cfg.out, "replay")
    write_trace(cfg.out / "trace.jsonl", [run.traces[pid] for pid in sorted(run.traces)])
    _dump(
        cfg.out / "dim1.json",
        {
            "report": run.report(transcripts),
            "verdicts": [v.to_dict() for v in run.verdicts],
            "failures": run.failures,
        },
    )
    if run.failures:
        for pid, msg in sorted(run.failures.items()):
            logger.error("%s: %s", pid, msg)
        return EXIT_GATEWAY
    return EXIT_OK


def _write_failures(path: Path, failures: Sequence[ReconciliationFailure]) -> None:
    path.write_text("".join(json.dumps(f.to_dict(), sort_keys=True) + "\n" for f in failures), encoding="utf-8")


def cmd_reconcile(cfg: RunConfig, args: argparse.Namespace) -> int:
    summaries = _summaries(cfg)
    transcripts = _transcripts(cfg)
    missing = sorted(t.patient_id for t in transcripts if t.patient_id not in summaries)
    if missing:
        raise DataError(f"no bundle for patients {missing}")
    gws = Gateways(cfg)
    try:
        if args.pipeline:
            traces = read_trace(_need(cfg.out / "trace.jsonl", "replay trace"))
            results, failures = reconcile_pipeline(gws["reconciliation"], transcripts, traces, summaries, cfg.workers)
            name = "pipeline"
        else:
            results, failures = reconcile_isolated(gws["reconciliation"], transcripts, summaries, cfg.workers)
            name = "isolated"
    finally:
        gws.write_audit(cfg.out, f"reconcile-{'pipeline' if args.pipeline else 'isolated'}")
    write_results(cfg.out / f"{name}.jsonl", results)
    _write_failures(cfg.out / f"{name}.failures.jsonl", failures)
    if failures:
        logger.error("%d reconciliation failures", len(failures))
        return EXIT_GATEWAY
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    transcripts = _transcripts(cfg)
    dim1 = json.loads(_need(cfg.out / "dim1.json", "replay output").read_text(encoding="utf-8"))["report"]
    iso = read_results(_need(cfg.out / "isolated.jsonl", "isolated results"))
    cpl = read_results(_need(cfg.out / "pipeline.jsonl", "pipeline results"))
    report = evaluate(
        dim1, _scenarios(cfg), transcripts, iso, cpl, cfg.seed, cfg.iterations, cfg.bootstrap_unit
    )
    if not report.cascade["identity_holds"]:
        raise DataError("cascade identity violated")
    _dump(cfg.out / "report.json", report.to_dict())
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    d = json.loads(_need(cfg.out / "report.json", "evaluation report").read_text(encoding="utf-8"))
    text = render_report(EvalReport(**d))
    (cfg.out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "curate": cmd_curate,
    "segment": cmd_segment,
    "build-hybrid": cmd_build_hybrid,
    "replay": cmd_replay,
    "reconcile": cmd_reconcile,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsrecon", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="RunConfig JSON file")
    common.add_argument("--mode", choices=("scripted", "live"), help="override config mode")
    common.add_argument("--workers", type=int, help="override worker count")
    common.add_argument("--seed", type=int, help="override bootstrap seed")
    common.add_argument("--out", help="override output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "reconcile":
            g = sp.add_mutually_exclusive_group(required=True)
            g.add_argument("--isolated", action="store_true", help="ground-truth memories (Dimension 2)")
            g.add_argument("--pipeline", action="store_true", help="extracted memories from the trace (Dimension 3)")
    return p


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.paths.out = args.out
    cfg.validate()
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, GatewayConfigError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except GatewayError as exc:
        logger.error("gateway error: %s", exc)
        return EXIT_GATEWAY
    except (DataError, OSError, ValueError, KeyError, IndexError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
