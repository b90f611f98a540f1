"""Reference-scale scripted corpus.

The design is calibrated by construction: every scripted model decision is
fixed up front so that the evaluation harness, run end to end over the
generated corpus, lands on a set of reference aggregate figures. The
harness never sees the design; it only sees prompts and scripted replies.

Construction happens in layers:

1. Scenario cells. Each of the scenarios gets a severity, a safety flag,
   an isolated outcome and a coupled outcome (kept, lost, gained or
   missed in both), expected resource types, and citation counts.
2. Patient parameters. Session counts, turn counts, ground-truth counts,
   captured-event counts, final memory counts and per-patient coupled
   detections are searched so that macro means, ranges and correlations
   come out right.
3. Materialization. Cells are dealt to patients, event verdicts are
   assigned, and :mod:`dsrecon.synthetic` turns the result into a
   :class:`CorpusBlueprint` with real text and FHIR bundles.
"""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Any, Callable, Sequence

from scipy import stats

from .catalog import PatientRecord, random_record, spoken_name, to_bundle
from .corpus import Scenario
from .dataset import PatientProfile
from .fhir_ingest import ClinicalResource, curate, parse_bundle
from .reconciliation import FhirResourceRef
from .synthetic import (
    COACH_CLOSERS,
    COACH_FOLLOWUPS,
    COACH_OPENERS,
    CorpusBlueprint,
    PatientBlueprint,
    PatientTurn,
    PlannedEvent,
    ScenarioPlan,
    SessionPlan,
    TextFactory,
)

SEVERITIES = ("low", "medium", "high")
TYPES = (
    "AllergyIntolerance",
    "CarePlan",
    "Condition",
    "Immunization",
    "MedicationRequest",
    "Observation",
    "Procedure",
)


# --------------------------------------------------------------------------
# Targets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusTargets:
    """Aggregate figures the reference corpus is built to reproduce."""

    patients: int = 26
    real_sessions: int = 432
    scenarios: int = 243
    patient_turns: int = 2296
    real_gt_events: int = 522
    synthetic_gt_events: int = 429
    final_memories: int = 408
    matches: int = 240
    partials: int = 425
    recall_mean: float = 0.708
    strict_mean: float = 0.262
    recall_range: tuple[float, float] = (0.49, 0.88)
    strict_range: tuple[float, float] = (0.07, 0.53)
    recall_sd: float = 0.086
    strict_sd: float = 0.109
    faithfulness: tuple[int, ...] = (5,) * 21 + (4,) * 5
    deduplication: tuple[int, ...] = (5,) * 5 + (4,) * 6 + (3,) * 15
    r_recall_turns: tuple[float, float] = (-0.46, 0.018)
    r_recall_final: tuple[float, float] = (-0.48, 0.013)
    r_detection_turns: tuple[float, float] = (0.12, 0.56)
    r_detection_final: tuple[float, float] = (0.02, 0.93)
    # scenario layer
    severity_counts: tuple[int, int, int] = (119, 71, 53)
    safety_counts: tuple[int, int, int] = (30, 27, 26)
    isolated_detected: tuple[int, int, int] = (100, 59, 46)
    isolated_safety_detected: tuple[int, int, int] = (26, 23, 23)
    lost: tuple[int, int, int] = (21, 11, 7)
    lost_safety: tuple[int, int, int] = (4, 3, 3)
    gained: tuple[int, int, int] = (3, 2, 1)
    gained_safety: tuple[int, int, int] = (0, 0, 1)
    contradiction_scenarios: int = 34
    contradiction_detected: int = 29
    isolated_non_informed: int = 19
    lost_non_informed: int = 4
    gained_informed: int = 4
    kept_losing_informed: int = 3
    isolated_recall_sum: float = 0.653 * 243
    isolated_precision_sum: float = 0.712 * 205
    coupled_recall_sum: float = 0.514 * 243
    coupled_precision_sum: float = 0.621 * 172
    # expected resource types: primary counts and added secondary memberships
    primary_types: tuple[tuple[str, int], ...] = (
        ("AllergyIntolerance", 6),
        ("Immunization", 25),
        ("Observation", 28),
        ("Procedure", 32),
        ("CarePlan", 50),
        ("MedicationRequest", 70),
        ("Condition", 32),
    )
    secondary_types: tuple[tuple[str, int], ...] = (
        ("Condition", 89),
        ("MedicationRequest", 22),
        ("CarePlan", 10),
    )
    duplicate_refs: tuple[tuple[str, int], ...] = (
        ("Condition", 2),
        ("MedicationRequest", 17),
        ("CarePlan", 3),
        ("Procedure", 2),
        ("Observation", 2),
    )
    type_detected: tuple[tuple[str, int, int], ...] = (
        ("AllergyIntolerance", 6, 4),
        ("CarePlan", 40, 35),
        ("Condition", 104, 90),
        ("Immunization", 25, 23),
        ("MedicationRequest", 82, 71),
        ("Observation", 23, 16),
        ("Procedure", 24, 21),
    )
    real_changed: int = 1124
    real_gaps: int = 187
    real_agreements: int = 1


# Predicted severity of isolated detections per ground-truth severity, split
# into (kept, lost) cells: {gt: {predicted: (kept, lost)}}. Lost cells carry
# 10 exact, 2 off-by-two and 27 adjacent predictions.
ISOLATED_SEVERITY: dict[str, dict[str, tuple[int, int]]] = {
    "low": {"low": (27, 3), "medium": (49, 17), "high": (3, 1)},
    "medium": {"low": (27, 6), "medium": (15, 3), "high": (6, 2)},
    "high": {"low": (2, 1), "medium": (21, 2), "high": (16, 4)},
}
# Kept cells whose coupled severity differs: (gt, isolated, coupled, count).
SEVERITY_SHIFTS = (("low", "medium", "low", 2), ("low", "medium", "high", 3))
# Coupled severity of gained cells per ground-truth severity.
GAINED_SEVERITY = {"low": ("low", "medium", "high"), "medium": ("low", "high"), "high": ("high",)}


# --------------------------------------------------------------------------
# Scenario cells
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    """What the scripted reconciler returns for one memory of a scenario."""

    classification: str
    severity: str
    matched: int
    cited: int

    def __post_init__(self) -> None:
        if not 0 <= self.matched <= self.cited or self.cited < 1:
            raise ValueError("need 0 <= matched <= cited and cited >= 1")


@dataclass
class Cell:
    index: int
    severity: str
    safety: bool
    kind: str  # kept, lost, gained, missed
    expected_type: str = "gap_patient"
    types: list[str] = field(default_factory=list)
    iso: Outcome | None = None
    pipe: Outcome | None = None
    iso_severity: str | None = None
    pipe_severity: str | None = None
    verdict: str = ""

    @property
    def k(self) -> int:
        return len(self.types)

    @property
    def changed(self) -> bool:
        return self.kind == "kept" and self.iso != self.pipe


def _recall(o: Outcome | None, k: int) -> float:
    return 0.0 if o is None else o.matched / k


def _precision(o: Outcome | None) -> float:
    return 0.0 if o is None else o.matched / o.cited


def build_cells(t: CorpusTargets, rng: random.Random) -> list[Cell]:
    """Scenario cells with detection, severity, safety and classification fixed."""
    cells: list[Cell] = []
    for si, sev in enumerate(SEVERITIES):
        group: list[Cell] = []
        kept_preds = [p for p, (k, _) in ISOLATED_SEVERITY[sev].items() for _ in range(k)]
        lost_preds = [p for p, (_, l) in ISOLATED_SEVERITY[sev].items() for _ in range(l)]
        if len(lost_preds) != t.lost[si] or len(kept_preds) + len(lost_preds) != t.isolated_detected[si]:
            raise ValueError(f"severity table inconsistent for {sev}")
        for p in kept_preds:
            group.append(Cell(0, sev, False, "kept", iso_severity=p, pipe_severity=p))
        for p in lost_preds:
            group.append(Cell(0, sev, False, "lost", iso_severity=p))
        for p in GAINED_SEVERITY[sev][: t.gained[si]]:
            group.append(Cell(0, sev, False, "gained", pipe_severity=p))
        n_missed = t.severity_counts[si] - t.isolated_detected[si] - t.gained[si]
        group += [Cell(0, sev, False, "missed") for _ in range(n_missed)]

        for g, a, b, n in SEVERITY_SHIFTS:
            if g != sev:
                continue
            pool = [c for c in group if c.kind == "kept" and c.iso_severity == a and c.pipe_severity == a]
            for c in rng.sample(pool, n):
                c.pipe_severity = b

        kept = [c for c in group if c.kind == "kept"]
        lost = [c for c in group if c.kind == "lost"]
        gained = [c for c in group if c.kind == "gained"]
        missed = [c for c in group if c.kind == "missed"]
        n_kept_safe = t.isolated_safety_detected[si] - t.lost_safety[si]
        n_missed_safe = t.safety_counts[si] - t.isolated_safety_detected[si] - t.gained_safety[si]
        for pool, n in ((kept, n_kept_safe), (lost, t.lost_safety[si]), (gained, t.gained_safety[si]), (missed, n_missed_safe)):
            for c in rng.sample(pool, n):
                c.safety = True
        cells += group

    detected = [c for c in cells if c.kind in ("kept", "lost")]
    undetected = [c for c in cells if c.kind in ("gained", "missed")]
    for c in rng.sample(detected, t.contradiction_detected):
        c.expected_type = "contradiction"
    for c in rng.sample(undetected, t.contradiction_scenarios - t.contradiction_detected):
        c.expected_type = "contradiction"
    rng.shuffle(cells)
    for i, c in enumerate(cells):
        c.index = i
    return cells


def assign_types(cells: list[Cell], t: CorpusTargets, rng: random.Random, steps: int = 200_000) -> None:
    """Deal expected resource types to cells, matching per-type detection counts by local search."""
    primaries = [ty for ty, n in t.primary_types for _ in range(n)]
    if len(primaries) != len(cells):
        raise ValueError("primary type counts must cover every scenario")
    sets = [[p] for p in primaries]
    for ty, n in t.secondary_types:
        pool = [s for s in sets if ty not in s]
        for s in rng.sample(pool, n):
            s.append(ty)
    rng.shuffle(sets)
    iso_det = [c.kind in ("kept", "lost") for c in cells]
    pipe_det = [c.kind in ("kept", "gained") for c in cells]
    target = {ty: (a, b) for ty, a, b in t.type_detected}

    def counts() -> dict[str, list[int]]:
        out = {ty: [0, 0] for ty in TYPES}
        for s, a, b in zip(sets, iso_det, pipe_det):
            for ty in set(s):
                out[ty][0] += a
                out[ty][1] += b
        return out

    def cost(cn: dict[str, list[int]]) -> int:
        return sum(abs(cn[ty][0] - target[ty][0]) + abs(cn[ty][1] - target[ty][1]) for ty in TYPES)

    cn = counts()
    cur = cost(cn)
    for _ in range(steps):
        if cur == 0:
            break
        i, j = rng.randrange(len(sets)), rng.randrange(len(sets))
        if (iso_det[i], pipe_det[i]) == (iso_det[j], pipe_det[j]):
            continue
        for ty in set(sets[i]):
            cn[ty][0] += iso_det[j] - iso_det[i]
            cn[ty][1] += pipe_det[j] - pipe_det[i]
        for ty in set(sets[j]):
            cn[ty][0] += iso_det[i] - iso_det[j]
            cn[ty][1] += pipe_det[i] - pipe_det[j]
        new = cost(cn)
        if new <= cur:
            sets[i], sets[j] = sets[j], sets[i]
            cur = new
        else:
            for ty in set(sets[i]):
                cn[ty][0] -= iso_det[j] - iso_det[i]
                cn[ty][1] -= pipe_det[j] - pipe_det[i]
            for ty in set(sets[j]):
                cn[ty][0] -= iso_det[i] - iso_det[j]
                cn[ty][1] -= pipe_det[i] - pipe_det[j]
    for ty, n in t.duplicate_refs:
        pool = [s for s in sets if ty in s and s.count(ty) == 1]
        for s in rng.sample(pool, n):
            s.append(ty)
    for c, s in zip(cells, sets):
        c.types = s


def fit_citations(cells: list[Cell], t: CorpusTargets, rng: random.Random, steps: int = 400_000) -> None:
    """Choose matched and cited counts so the four resource means land on target.

    Kept cells are linked (coupled outcome equal to the isolated one) unless
    the search decides to unlink them; unlinked kept cells later need a
    partial extraction so the reconciler sees different text.
    """
    by_kind: dict[str, list[Cell]] = defaultdict(list)
    for c in cells:
        by_kind[c.kind].append(c)
    lost_non = {c.index for c in rng.sample(by_kind["lost"], t.lost_non_informed)}
    kept_non = {c.index for c in rng.sample(by_kind["kept"], t.isolated_non_informed - t.lost_non_informed)}
    kept_losing = {
        c.index for c in rng.sample([c for c in by_kind["kept"] if c.index not in kept_non], t.kept_losing_informed)
    }
    gained_ri = {c.index for c in rng.sample(by_kind["gained"], t.gained_informed)}
    shifted = {c.index for c in by_kind["kept"] if c.iso_severity != c.pipe_severity}

    def options(k: int, informed: bool) -> list[tuple[int, int]]:
        if not informed:
            return [(0, 1), (0, 2)]
        return [(m, q) for m in range(1, k + 1) for q in range(m, m + 3)]

    k_of = {c.index: c.k for c in cells}
    iso_opts, pipe_opts = {}, {}
    for c in cells:
        if c.kind in ("kept", "lost"):
            iso_opts[c.index] = options(c.k, c.index not in lost_non | kept_non)
        if c.kind == "kept":
            pipe_opts[c.index] = options(c.k, c.index not in kept_non | kept_losing)
        if c.kind == "gained":
            pipe_opts[c.index] = options(c.k, c.index in gained_ri)
    iso = {i: rng.choice(o) for i, o in iso_opts.items()}
    linked = {c.index for c in by_kind["kept"] if c.index not in kept_losing}
    pipe = {i: (iso[i] if i in linked else rng.choice(o)) for i, o in pipe_opts.items()}

    goal = (t.isolated_recall_sum, t.isolated_precision_sum, t.coupled_recall_sum, t.coupled_precision_sum)

    def contrib(i: int, mq: tuple[int, int]) -> tuple[float, float]:
        return mq[0] / k_of[i], mq[0] / mq[1]

    sums = [0.0, 0.0, 0.0, 0.0]
    for i, mq in iso.items():
        a, b = contrib(i, mq)
        sums[0] += a
        sums[1] += b
    for i, mq in pipe.items():
        a, b = contrib(i, mq)
        sums[2] += a
        sums[3] += b

    # each mean must sit within 0.0004 of its three-decimal target
    tol = [0.0004 * len(cells), 0.0004 * len(iso), 0.0004 * len(cells), 0.0004 * len(pipe)]

    def cost(s: Sequence[float]) -> float:
        return sum(abs(a - g) for a, g in zip(s, goal))

    def done(s: Sequence[float]) -> bool:
        return all(abs(a - g) < e for a, g, e in zip(s, goal, tol))

    cur = cost(sums)
    temp = 0.5
    keys_iso, keys_pipe = list(iso), list(pipe)
    for step in range(steps):
        if done(sums):
            break
        temp = max(1e-4, temp * 0.99997)
        trial = list(sums)
        r = rng.random()
        if r < 0.5:
            i = rng.choice(keys_iso)
            new_iso, new_pipe, new_link = rng.choice(iso_opts[i]), None, None
            a0, b0 = contrib(i, iso[i])
            a1, b1 = contrib(i, new_iso)
            trial[0] += a1 - a0
            trial[1] += b1 - b0
            if i in linked:
                new_pipe = new_iso
        elif r < 0.85:
            i = rng.choice(keys_pipe)
            if i in linked and i in shifted:
                continue
            new_iso, new_pipe = None, rng.choice(pipe_opts[i])
            new_link = False if i in linked else None
        else:
            i = rng.choice(keys_pipe)
            if i not in iso or i in kept_losing or i in shifted:
                continue
            new_iso = None
            if i in linked:
                new_pipe, new_link = rng.choice(pipe_opts[i]), False
            else:
                new_pipe, new_link = iso[i], True
        if new_pipe is not None:
            a0, b0 = contrib(i, pipe[i])
            a1, b1 = contrib(i, new_pipe)
            trial[2] += a1 - a0
            trial[3] += b1 - b0
        c2 = cost(trial)
        if c2 <= cur or rng.random() < math.exp((cur - c2) / temp):
            cur, sums = c2, trial
            if new_iso is not None:
                iso[i] = new_iso
            if new_pipe is not None:
                pipe[i] = new_pipe
            if new_link is True:
                linked.add(i)
            elif new_link is False:
                linked.discard(i)
    if not done(sums):
        raise RuntimeError(f"citation fit did not converge (sums {sums}, goal {goal})")
    for c in cells:
        if c.index in iso:
            c.iso = Outcome(c.expected_type, c.iso_severity, *iso[c.index])
        if c.index in pipe:
            c.pipe = Outcome(c.expected_type, c.pipe_severity, *pipe[c.index])


# --------------------------------------------------------------------------
# Patient parameters
# --------------------------------------------------------------------------


@dataclass
class PatientParams:
    scenarios: int
    turns: int
    real_sessions: int = 0
    real_events: int = 0
    second_events: int = 0
    captured: int = 0
    matched: int = 0
    final: int = 0
    detected: int = 0
    faithfulness: int = 5
    deduplication: int = 5

    @property
    def real_turns(self) -> int:
        return self.turns - 3 * self.scenarios

    @property
    def events(self) -> int:
        return self.real_events + self.scenarios + self.second_events


def _split_total(weights: Sequence[float], total: int, lo: Sequence[int], rng: random.Random) -> list[int]:
    """Integers proportional to ``weights`` summing to ``total`` with per-entry floors."""
    raw = [max(l, w * total / sum(weights)) for w, l in zip(weights, lo)]
    out = [max(l, int(round(r))) for r, l in zip(raw, lo)]
    while sum(out) != total:
        i = rng.randrange(len(out))
        if sum(out) > total and out[i] > lo[i]:
            out[i] -= 1
        elif sum(out) < total:
            out[i] += 1
    return out


def _r(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy) if sxx and syy else 0.0


def _p(r: float, n: int) -> float:
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(2 * stats.t.sf(abs(t), n - 2))


def r_window(target: tuple[float, float], n: int) -> tuple[float, float]:
    """Interval of r whose value rounds to ``target[0]`` (two places) and whose p-value rounds to ``target[1]``."""
    r0, p0 = target
    digits = len(repr(p0).split(".")[1])
    ok = [
        k / 1e5
        for k in range(int(round((r0 - 0.006) * 1e5)), int(round((r0 + 0.006) * 1e5)) + 1)
        if round(k / 1e5, 2) == r0 and round(_p(k / 1e5, n), digits) == p0
    ]
    if not ok:
        raise ValueError(f"no r is consistent with {target} at n={n}")
    # keep clear of the edges so float noise cannot flip the rounding
    return min(ok) + 2e-5, max(ok) - 2e-5


def _outside(v: float, lo: float, hi: float) -> float:
    return max(0.0, lo - v, v - hi)


def _sd(v: Sequence[float]) -> float:
    m = sum(v) / len(v)
    return math.sqrt(sum((x - m) ** 2 for x in v) / (len(v) - 1))


def fit_patients(t: CorpusTargets, rng: random.Random, steps: int = 300_000) -> list[PatientParams]:
    n = t.patients
    extra = t.scenarios - 9 * n
    scen = [10] * extra + [9] * (n - extra)
    rng.shuffle(scen)
    base = [rng.lognormvariate(0, 0.35) for _ in range(n)]
    real_turns = _split_total(base, t.patient_turns - 3 * t.scenarios, [14] * n, rng)
    ps = [PatientParams(s, rt + 3 * s) for s, rt in zip(scen, real_turns)]
    sessions = _split_total([p.real_turns * rng.uniform(0.9, 1.1) for p in ps], t.real_sessions, [4] * n, rng)
    events = _split_total([p.real_turns * rng.uniform(0.8, 1.2) for p in ps], t.real_gt_events, [4] * n, rng)
    seconds = _split_total([p.scenarios for p in ps], t.synthetic_gt_events - t.scenarios, [0] * n, rng)
    finals = _split_total([4 + 0.12 * p.turns + rng.uniform(-4, 4) for p in ps], t.final_memories, [4] * n, rng)
    for p, s, e, e2, f in zip(ps, sessions, events, seconds, finals):
        p.real_sessions = min(s, p.real_turns)
        p.real_events = min(e, p.real_turns - 2)
        p.second_events = min(e2, p.scenarios)
        p.final = f
    # sums may drift after clipping; repair by moving units between patients
    for attr, total, cap in (
        ("real_sessions", t.real_sessions, lambda p: p.real_turns),
        ("real_events", t.real_gt_events, lambda p: p.real_turns - 2),
        ("second_events", t.synthetic_gt_events - t.scenarios, lambda p: p.scenarios),
    ):
        while sum(getattr(p, attr) for p in ps) != total:
            p = rng.choice(ps)
            v = getattr(p, attr)
            if sum(getattr(q, attr) for q in ps) < total and v < cap(p):
                setattr(p, attr, v + 1)
            elif sum(getattr(q, attr) for q in ps) > total and v > 1:
                setattr(p, attr, v - 1)

    # captured and matched counts, initialised near the targets with exact sums
    ev = [p.events for p in ps]
    mean_turns = sum(p.turns for p in ps) / n
    rec = [t.recall_mean - 0.0012 * (p.turns - mean_turns) + rng.gauss(0, 0.05) for p in ps]
    cap_ = _split_total([r * e for r, e in zip(rec, ev)], t.matches + t.partials, [2] * n, rng)
    cap_ = [min(c, e - 1) for c, e in zip(cap_, ev)]
    mat = _split_total([max(0.02, t.strict_mean + rng.gauss(0, 0.1)) * e for e in ev], t.matches, [1] * n, rng)
    mat = [min(m, c) for m, c in zip(mat, cap_)]
    for arr, total, cap in ((cap_, t.matches + t.partials, lambda i: ev[i] - 1), (mat, t.matches, lambda i: cap_[i])):
        while sum(arr) != total:
            i = rng.randrange(n)
            if sum(arr) < total and arr[i] < cap(i):
                arr[i] += 1
            elif sum(arr) > total and arr[i] > 1:
                arr[i] -= 1

    turns = [p.turns for p in ps]
    fin = [p.final for p in ps]
    w_rt = r_window(t.r_recall_turns, n)
    w_rf = r_window(t.r_recall_final, n)
    tol = 0.0004

    def cost() -> float:
        R = [c / e for c, e in zip(cap_, ev)]
        S = [m / e for m, e in zip(mat, ev)]
        out = 100 * _outside(sum(R) / n, t.recall_mean - tol, t.recall_mean + tol)
        out += 100 * _outside(sum(S) / n, t.strict_mean - tol, t.strict_mean + tol)
        for v, g in ((min(R), t.recall_range[0]), (max(R), t.recall_range[1]), (min(S), t.strict_range[0]), (max(S), t.strict_range[1])):
            out += 20 * _outside(v, g - 0.0045, g + 0.0045)
        out += 20 * _outside(_r(turns, R), *w_rt) + 20 * _outside(_r(fin, R), *w_rf)
        out += 2 * _outside(_sd(R), t.recall_sd - 0.005, t.recall_sd + 0.005)
        out += 2 * _outside(_sd(S), t.strict_sd - 0.005, t.strict_sd + 0.005)
        return out

    cur = cost()
    temp = 0.05
    for step in range(steps):
        if cur == 0:
            break
        temp = max(1e-6, temp * 0.99995)
        i, j = rng.randrange(n), rng.randrange(n)
        if i == j:
            continue
        move = rng.randrange(3)
        arr = (cap_, mat, fin)[move]
        arr[i] += 1
        arr[j] -= 1
        valid = (
            mat[i] <= cap_[i] <= ev[i] - 1 and mat[j] <= cap_[j] <= ev[j] - 1
            and 1 <= mat[j] and 1 <= mat[i] and fin[j] >= 4
        )
        c2 = cost() if valid else math.inf
        if c2 <= cur or (valid and rng.random() < math.exp((cur - c2) / temp)):
            cur = c2
        else:
            arr[i] -= 1
            arr[j] += 1
    if cur > 0:
        raise RuntimeError(f"patient fit did not converge (residual {cur:.4f})")

    for p, c, m, f in zip(ps, cap_, mat, fin):
        p.captured, p.matched, p.final = c, m, f
    faith = list(t.faithfulness)
    dedup = list(t.deduplication)
    rng.shuffle(faith)
    rng.shuffle(dedup)
    for p, a, b in zip(ps, faith, dedup):
        p.faithfulness, p.deduplication = a, b
    return ps


def fit_detections(ps: list[PatientParams], total: int, t: CorpusTargets, rng: random.Random, steps: int = 200_000) -> None:
    """Per-patient coupled detection counts with the two target correlations."""
    n = len(ps)
    det = [min(d, p.scenarios) for d, p in zip(_split_total([p.scenarios for p in ps], total, [0] * n, rng), ps)]
    while sum(det) < total:
        i = rng.randrange(n)
        if det[i] < ps[i].scenarios:
            det[i] += 1
    turns = [p.turns for p in ps]
    fin = [p.final for p in ps]
    w_t = r_window(t.r_detection_turns, n)
    w_f = r_window(t.r_detection_final, n)

    def cost() -> float:
        D = [d / p.scenarios for d, p in zip(det, ps)]
        return _outside(_r(turns, D), *w_t) + _outside(_r(fin, D), *w_f)

    cur = cost()
    temp = 0.02
    for _ in range(steps):
        if cur == 0:
            break
        temp = max(1e-6, temp * 0.9999)
        i, j = rng.randrange(n), rng.randrange(n)
        if i == j or det[i] >= ps[i].scenarios or det[j] <= ps[j].scenarios - 6:
            continue
        det[i] += 1
        det[j] -= 1
        c2 = cost()
        if c2 <= cur or rng.random() < math.exp((cur - c2) / temp):
            cur = c2
        else:
            det[i] -= 1
            det[j] += 1
    if cur > 0:
        raise RuntimeError(f"detection fit did not converge (residual {cur:.4f})")
    for p, d in zip(ps, det):
        p.detected = d


# --------------------------------------------------------------------------
# Dealing cells and verdicts
# --------------------------------------------------------------------------


@dataclass
class PatientDraft:
    """Everything decided for one patient before any text is written."""

    patient_id: str
    params: PatientParams
    cells: list[Cell]
    second_event: list[bool]
    second_verdicts: list[str]
    real_verdicts: list[str]


def _verdicts_for(cells: list[Cell], params: PatientParams, rng: random.Random) -> PatientDraft | None:
    """Assign M/P/N verdicts to every event of one patient; None when the counts cannot be met."""
    need = {"M": params.matched, "P": params.captured - params.matched, "N": params.events - params.captured}
    # forced partials: unlinked kept cells and gained cells
    forced = [c for c in cells if c.changed or c.kind == "gained"]
    lost = [c for c in cells if c.kind == "lost"]
    linked = [c for c in cells if c.kind == "kept" and not c.changed]
    missed = [c for c in cells if c.kind == "missed"]
    for c in forced:
        c.verdict = "P"
    need["P"] -= len(forced)
    for c in lost:
        c.verdict = "N" if need["N"] > 0 else "P"
        need[c.verdict] -= 1
    rng.shuffle(linked)
    for c in linked:
        c.verdict = "M" if need["M"] > 0 else "P"
        need[c.verdict] -= 1
    if min(need.values()) < 0:
        return None
    free = [v for v, n in need.items() for _ in range(n)]
    n_free = len(missed) + params.second_events + params.real_events
    if len(free) != n_free:
        raise AssertionError("event bookkeeping is off")
    rng.shuffle(free)
    for c in missed:
        c.verdict = free.pop()
    second = [True] * params.second_events + [False] * (params.scenarios - params.second_events)
    rng.shuffle(second)
    seconds = [free.pop() for _ in range(params.second_events)]
    return PatientDraft("", params, cells, second, seconds, free)


def deal(cells: list[Cell], params: list[PatientParams], rng: random.Random, tries: int = 500) -> list[PatientDraft]:
    """Deal scenario cells to patients so each gets its coupled detection count, then assign verdicts."""
    hit = [c for c in cells if c.kind in ("kept", "gained")]
    miss = [c for c in cells if c.kind in ("lost", "missed")]
    if sum(p.detected for p in params) != len(hit):
        raise ValueError("per-patient detections must add up to the coupled detections")
    for _ in range(tries):
        rng.shuffle(hit)
        rng.shuffle(miss)
        drafts, a, b = [], 0, 0
        for p in params:
            mine = hit[a : a + p.detected] + miss[b : b + p.scenarios - p.detected]
            a += p.detected
            b += p.scenarios - p.detected
            rng.shuffle(mine)
            d = _verdicts_for(mine, p, rng)
            if d is None:
                break
            drafts.append(d)
        else:
            return drafts
    raise RuntimeError("could not deal cells with feasible verdict counts")


# --------------------------------------------------------------------------
# Materialization
# --------------------------------------------------------------------------

COACHING_START = date(2023, 1, 9)
RECORD_DATE = date(2023, 1, 1)


def _result(o: Outcome, expected: list[FhirResourceRef], others: list[FhirResourceRef], rng: random.Random) -> dict[str, Any]:
    cited = expected[: o.matched] + others[: o.cited - o.matched]
    return {
        "contradiction_type": o.classification,
        "confidence": round(rng.uniform(0.6, 0.95), 2),
        "justification": (
            "The statement conflicts with the documented record."
            if o.classification == "contradiction"
            else "The patient reports clinically relevant information the record does not capture."
        ),
        "clinical_severity": o.severity,
        "fhir_resources_considered": [r.to_dict() for r in cited],
    }


def _ref(res: ClinicalResource) -> FhirResourceRef:
    return FhirResourceRef(res.resource_type, res.code.code_system, res.code.code_value, res.code.display)


def _name(res: ClinicalResource) -> str:
    return spoken_name(res.code.code_system, res.code.code_value) or res.code.display.split(":")[-1].strip().lower()


def _profile(rec: PatientRecord, rng: random.Random) -> PatientProfile:
    age = (COACHING_START - rec.birth_date).days / 365.25
    conds = [c.code for c, _, _ in rec.conditions]
    return PatientProfile(
        age=round(age),
        gender=rec.gender,
        condition_codes=frozenset(rng.sample(conds, max(1, (2 * len(conds)) // 3))),
        medication_codes=frozenset(m.code for m, _, _ in rec.medications),
    )


@dataclass
class FillerQuota:
    extra: int = 0
    updates: int = 0
    gaps: int = 0
    agreements: int = 0


def _bounded_split(
    weights: Sequence[float], total: int, lo: Sequence[int], hi: Sequence[int], rng: random.Random
) -> list[int]:
    """Like :func:`_split_total` but also honouring per-entry ceilings."""
    if not sum(lo) <= total <= sum(hi):
        raise ValueError("total outside the bounds")
    out = [min(h, v) for v, h in zip(_split_total(weights, total, lo, rng), hi)]
    while sum(out) != total:
        i = rng.randrange(len(out))
        if sum(out) < total and out[i] < hi[i]:
            out[i] += 1
        elif sum(out) > total and out[i] > lo[i]:
            out[i] -= 1
    return out


def filler_quotas(
    drafts: list[PatientDraft], changed: int, gaps: int, agreements: int, rng: random.Random
) -> list[FillerQuota]:
    """Split the real-session changed-memory budget into filler inserts and updates per patient.

    Each patient needs enough inserts overall to end with its planned final
    memory count, and at most one filler insert per chatter turn.
    """
    n = len(drafts)
    captured_real = [sum(v != "N" for v in d.real_verdicts) for d in drafts]
    chatter = [d.params.real_turns - d.params.real_events for d in drafts]
    floor = [max(0, d.params.final - d.params.captured) for d in drafts]
    rest = changed - sum(captured_real)
    if rest < gaps + agreements:
        raise ValueError("changed-memory budget is smaller than the flagged fillers")
    n_updates = rest // 7
    extras = _bounded_split(chatter, rest - n_updates, floor, chatter, rng)
    updates = _split_total(extras, n_updates, [0] * n, rng)
    gap_share = _bounded_split(extras, gaps, [0] * n, [max(0, e - 1) for e in extras], rng)
    out = [FillerQuota(e, u, g) for e, u, g in zip(extras, updates, gap_share)]
    for _ in range(agreements):
        q = max(out, key=lambda q: q.extra - q.gaps - q.agreements)
        q.agreements += 1
    return out


def _expected_refs(cell: Cell, pool: dict[str, list[ClinicalResource]], rng: random.Random) -> list[FhirResourceRef]:
    picked: list[ClinicalResource] = []
    for ty in cell.types:
        options = [r for r in pool[ty] if r not in picked]
        if not options:
            raise RuntimeError(f"summary has too few {ty} resources for scenario {cell.index}")
        picked.append(rng.choice(options))
    return [_ref(r) for r in picked]


def plan_updates_and_deletes(
    order: list[tuple[date | None, list[PatientTurn]]],
    updates: int,
    final: int,
    protected: set[str],
    factory: TextFactory,
    rng: random.Random,
) -> None:
    """Add update and delete operations to real-session turns.

    ``order`` lists sessions in processing order; real sessions carry their
    date, scenario sessions carry None and never receive operations. Updates
    revise the most recent logged filler memory. Deletes drop the oldest
    memories whenever the store exceeds a cap, and the cap is searched so the
    store ends with exactly ``final`` memories.
    """
    flat = [(when, t) for when, ts in order for t in ts]
    real_idx = [i for i, (when, _) in enumerate(flat) if when is not None]
    wanted = Counter(rng.choice(real_idx[1:]) for _ in range(updates))

    def inserted(t: PatientTurn) -> list[tuple[str, bool]]:
        out = []
        if t.event is not None and t.event.stored is not None:
            out.append((t.event.stored, False))
        out += [(op["content"], op["content"] not in protected) for op in t.ops if op["op"] == "insert"]
        return out

    def simulate(cap: int, apply: bool) -> int:
        live: list[list] = []  # [content, is_filler]
        pending = 0
        revisions = iter(revised)
        for i, (when, t) in enumerate(flat):
            ops: list[dict[str, Any]] = []
            if when is not None:
                new = inserted(t)
                excess = len(live) + len(new) - cap
                if i == real_idx[-1]:
                    excess = max(excess, len(live) + len(new) - final)
                gone = live[: max(0, excess)]
                live = live[max(0, excess):]
                ops += [{"op": "delete", "target": c} for c, _ in gone]
                pending += wanted.get(i, 0)
                for m in reversed(live):
                    if pending == 0:
                        break
                    if m[1]:
                        content = next(revisions)
                        ops.append({"op": "update", "target": m[0], "content": content, "category": "lifestyle"})
                        m[0] = content
                        pending -= 1
                live += [list(x) for x in new]
            else:
                live += [list(x) for x in inserted(t)]
            if apply:
                t.ops = [op for op in t.ops if op["op"] == "insert"] + ops
        return -1 if pending else len(live)

    revised = [factory.revision(flat[i][0]) for i in sorted(wanted.elements())]
    total = sum(len(inserted(t)) for _, t in flat)
    lo, hi = 0, total
    while lo < hi:  # smallest cap that places every update and keeps ``final`` memories
        mid = (lo + hi) // 2
        if simulate(mid, False) >= final:
            hi = mid
        else:
            lo = mid + 1
    if simulate(lo, True) != final:
        raise RuntimeError("could not place every update and reach the planned final memory count")


def materialize_patient(
    draft: PatientDraft,
    quota: FillerQuota,
    factory: TextFactory,
    recon: dict[str, dict[str, Any]],
    rng: random.Random,
    start: date,
) -> PatientBlueprint:
    """Write text, dates, FHIR content and memory operations for one patient."""
    pid = draft.patient_id
    p = draft.params
    record = random_record(rng, pid, RECORD_DATE)
    decoys = [random_record(rng, f"{pid}-alt{k}", RECORD_DATE) for k in range(3)]
    summary = curate(parse_bundle(to_bundle(record), pid))
    pool: dict[str, list[ClinicalResource]] = defaultdict(list)
    for res in summary.included:
        pool[res.resource_type].append(res)
    conditions = [_name(r) for r in pool["Condition"]]
    medications = [_name(r) for r in pool["MedicationRequest"]]

    # real session skeleton: patient turns per session, event positions
    per_session = _split_total([rng.uniform(0.5, 1.5) for _ in range(p.real_sessions)], p.real_turns, [1] * p.real_sessions, rng)
    dates, d = [], start
    for _ in range(p.real_sessions):
        dates.append(d)
        d += timedelta(days=rng.randint(3, 7))
    slots = [(k, j) for k, n in enumerate(per_session) for j in range(n)]
    event_slots = set(rng.sample(range(len(slots)), p.real_events))
    chatter_slots = [i for i in range(len(slots)) if i not in event_slots]
    filler_slots = set(rng.sample(chatter_slots, quota.extra))
    gap_slots = set(rng.sample(sorted(filler_slots), quota.gaps))
    agree_slots = set(rng.sample(sorted(filler_slots - gap_slots), quota.agreements))

    turns: list[PatientTurn] = []
    gap_contents: set[str] = set()
    real_verdicts = iter(draft.real_verdicts)
    for i, (k, _) in enumerate(slots):
        when = dates[k]
        if i in event_slots:
            fact = factory.coaching_fact(when)
            turns.append(PatientTurn(fact.utterance, PlannedEvent(fact, next(real_verdicts))))
        elif i in filler_slots:
            if i in gap_slots:
                u, mem = factory.symptom_chatter(when, rng.choice(conditions) if conditions else None)
                cond = rng.choice(pool["Condition"]) if pool["Condition"] else None
                recon[mem] = {
                    "contradiction_type": "gap_patient",
                    "confidence": round(rng.uniform(0.55, 0.85), 2),
                    "justification": "The patient reports a symptom that the record does not document.",
                    "clinical_severity": "low",
                    "fhir_resources_considered": [_ref(cond).to_dict()] if cond else [],
                }
                gap_contents.add(mem)
                cat = "health"
            elif i in agree_slots and medications:
                res = rng.choice(pool["MedicationRequest"])
                u, mem = factory.medication_chatter(when, _name(res))
                recon[mem] = {
                    "contradiction_type": "agreement",
                    "confidence": 0.9,
                    "justification": "The reported medication matches the record.",
                    "clinical_severity": "low",
                    "fhir_resources_considered": [_ref(res).to_dict()],
                }
                gap_contents.add(mem)
                cat = "medication"
            else:
                u, mem = factory.chatter(when)
                cat = "lifestyle"
            turns.append(PatientTurn(u, ops=[{"op": "insert", "content": mem, "category": cat}]))
        else:
            turns.append(PatientTurn(factory.chatter(when)[0]))

    # scenario sessions anchored between real sessions (never after the last one)
    last = max(0, p.real_sessions - 2)
    anchors = sorted(rng.sample(range(last + 1), p.scenarios) if last + 1 >= p.scenarios else [rng.randint(0, last) for _ in range(p.scenarios)])
    scenario_plans: list[ScenarioPlan] = []
    for j, (cell, anchor, has_second, ) in enumerate(zip(draft.cells, anchors, draft.second_event)):
        here = dates[anchor]
        nxt = dates[anchor + 1] if anchor + 1 < len(dates) else here + timedelta(days=2)
        when = here + timedelta(days=(nxt - here).days // 2)
        expected = _expected_refs(cell, pool, rng)
        others = [_ref(r) for rs in pool.values() for r in rs if _ref(r).key not in {e.key for e in expected}]
        rng.shuffle(others)
        primary = next(r for r in summary.included if _ref(r).key == expected[0].key)
        fact = factory.clinical_fact(cell.types[0], cell.expected_type, _name(primary), when)
        if cell.iso is not None:
            recon[fact.memory] = _result(cell.iso, expected, others, rng)
        if cell.verdict == "P" and cell.pipe is not None:
            recon[fact.gist] = recon[fact.memory] if cell.pipe == cell.iso else _result(cell.pipe, expected, others, rng)
        if cell.verdict == "M" and cell.pipe != cell.iso:
            raise AssertionError("a matched extraction must reproduce the isolated outcome")
        sid = f"{pid}-sc{j:02d}"
        scenario = Scenario(
            scenario_id=sid,
            patient_id=pid,
            description=f"[{sid}] Patient brings up their {_name(primary)} while talking about activity goals",
            expected_type=cell.expected_type,
            severity_gt=cell.severity,
            safety_critical=cell.safety,
            expected_refs=tuple(expected),
            session_id=f"{pid}-s{j:03d}",
        )
        ev1 = PatientTurn(fact.utterance, PlannedEvent(fact, cell.verdict))
        if has_second:
            f2 = factory.context_fact(when)
            ev2 = PatientTurn(f2.utterance, PlannedEvent(f2, draft.second_verdicts.pop()))
        else:
            ev2 = PatientTurn(factory.filler_turn())
        items = [
            ("coach", factory.coach(COACH_OPENERS)),
            ("patient", ev1),
            ("coach", factory.coach(COACH_FOLLOWUPS)),
            ("patient", ev2),
            ("coach", factory.coach(COACH_CLOSERS)),
            ("patient", PatientTurn(factory.closer())),
        ]
        scenario_plans.append(ScenarioPlan(scenario, anchor, items))

    # memory operations: updates and deletes, simulated in processing order
    sessions_turns: list[list[PatientTurn]] = [[] for _ in range(p.real_sessions)]
    for (k, _), t in zip(slots, turns):
        sessions_turns[k].append(t)
    order: list[tuple[date | None, list[PatientTurn]]] = []
    by_anchor: dict[int, list[ScenarioPlan]] = defaultdict(list)
    for sp in scenario_plans:
        by_anchor[sp.anchor].append(sp)
    for k in range(p.real_sessions):
        order.append((dates[k], sessions_turns[k]))
        for sp in by_anchor.get(k, []):
            order.append((None, [it for _, it in sp.items if isinstance(it, PatientTurn)]))
    plan_updates_and_deletes(order, quota.updates, p.final, gap_contents, factory, rng)

    sessions = []
    for k, ts in enumerate(sessions_turns):
        hour = rng.randint(7, 19)
        begin = datetime.combine(dates[k], datetime.min.time()) + timedelta(hours=hour, minutes=rng.randint(0, 59))
        items: list[tuple[str, str | PatientTurn]] = []
        for t in ts:
            items.append(("coach", factory.coach(COACH_OPENERS if not items else COACH_FOLLOWUPS)))
            items.append(("patient", t))
        items.append(("coach", factory.coach(COACH_CLOSERS)))
        sessions.append(SessionPlan(begin, items, [2 * i for i in range(len(items))]))
    return PatientBlueprint(
        record, _profile(record, rng), decoys, sessions, scenario_plans, p.faithfulness, p.deduplication
    )


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------


@dataclass
class Design:
    """The numeric design behind a blueprint, kept for inspection and tests."""

    cells: list[Cell]
    params: list[PatientParams]
    drafts: list[PatientDraft]
    quotas: list[FillerQuota]


def _retry(layer: str, seed: int, fn: Callable[[random.Random], Any], attempts: int = 20) -> Any:
    """Run a stochastic search layer, restarting from a fresh stream when it fails to converge."""
    for a in range(attempts):
        try:
            return fn(random.Random(f"{seed}/{layer}/{a}"))
        except RuntimeError:
            continue
    raise RuntimeError(f"{layer} did not converge in {attempts} attempts")


def design(t: CorpusTargets | None = None, seed: int = 0) -> Design:
    t = t or CorpusTargets()

    def scenario_layer(rng: random.Random) -> list[Cell]:
        cells = build_cells(t, rng)
        assign_types(cells, t, rng)
        fit_citations(cells, t, rng)
        return cells

    def patient_layer(rng: random.Random) -> list[PatientParams]:
        params = fit_patients(t, rng)
        fit_detections(params, sum(c.kind in ("kept", "gained") for c in cells), t, rng)
        return params

    cells = _retry("cells", seed, scenario_layer)
    params = _retry("patients", seed, patient_layer)
    rng = random.Random(f"{seed}/deal")
    drafts = deal(cells, params, rng)
    for i, d in enumerate(drafts):
        d.patient_id = f"P{i + 1:03d}"
    quotas = filler_quotas(drafts, t.real_changed, t.real_gaps, t.real_agreements, rng)
    return Design(cells, params, drafts, quotas)


def materialize(d: Design, seed: int = 0) -> CorpusBlueprint:
    rng = random.Random(seed)
    factory = TextFactory(rng)
    recon: dict[str, dict[str, Any]] = {}
    patients = []
    for draft, quota in zip(d.drafts, d.quotas):
        start = COACHING_START + timedelta(days=rng.randint(0, 20))
        patients.append(materialize_patient(draft, quota, factory, recon, rng, start))
    return CorpusBlueprint(patients, recon, COACHING_START)


def reference_blueprint(seed: int = 0) -> CorpusBlueprint:
    """The full reference-scale corpus blueprint (26 patients, 243 scenarios)."""
    return materialize(design(seed=seed), seed)


# --------------------------------------------------------------------------
# Small designs
# --------------------------------------------------------------------------


def small_design(
    seed: int = 0,
    patients: int = 3,
    scenarios: int = 2,
    real_sessions: int = 3,
    real_turns: int = 10,
    real_events: int = 3,
    extra_changed: int = 5,
    gaps: int = 1,
    agreements: int = 1,
) -> Design:
    """A random desk-scale design with the same moving parts as the reference one.

    Every outcome is drawn directly instead of being fitted to targets, so
    the corpus is useful for demos and end-to-end tests but lands on no
    particular figures.
    """
    rng = random.Random(f"{seed}/small")
    types = ("Condition", "MedicationRequest", "Procedure", "Immunization", "AllergyIntolerance")
    cells: list[Cell] = []
    drafts: list[PatientDraft] = []
    for i in range(patients):
        mine = []
        for _ in range(scenarios):
            c = Cell(
                len(cells),
                rng.choice(SEVERITIES),
                rng.random() < 0.3,
                rng.choice(("kept", "kept", "lost", "gained", "missed")),
                rng.choice(("gap_patient", "gap_patient", "contradiction")),
            )
            c.types = [rng.choice(types)] + (["Condition"] if rng.random() < 0.4 else [])

            def outcome() -> Outcome:
                m = rng.randint(0, c.k)
                return Outcome(c.expected_type, rng.choice(SEVERITIES), m, max(1, m + rng.randint(0, 1)))

            if c.kind in ("kept", "lost"):
                c.iso = outcome()
                c.iso_severity = c.iso.severity
            if c.kind == "kept":
                c.pipe = c.iso if rng.random() < 0.7 else outcome()
            elif c.kind == "gained":
                c.pipe = outcome()
            if c.pipe is not None:
                c.pipe_severity = c.pipe.severity
            if c.changed or c.kind == "gained":
                c.verdict = "P"
            elif c.kind == "kept":
                c.verdict = rng.choice("MP")
            elif c.kind == "lost":
                c.verdict = rng.choice("NP")
            else:
                c.verdict = rng.choice("MPN")
            cells.append(c)
            mine.append(c)
        second = [rng.random() < 0.7 for _ in range(scenarios)]
        seconds = [rng.choice("MPN") for _ in range(sum(second))]
        reals = [rng.choice("MMPN") for _ in range(real_events)]
        verdicts = [c.verdict for c in mine] + seconds + reals
        captured = sum(v != "N" for v in verdicts)
        params = PatientParams(
            scenarios,
            real_turns + 3 * scenarios,
            real_sessions,
            real_events,
            len(seconds),
            captured,
            verdicts.count("M"),
            final=max(1, captured // 2 + 2),
            detected=sum(c.kind in ("kept", "gained") for c in mine),
            faithfulness=rng.choice((4, 5)),
            deduplication=rng.choice((3, 4, 5)),
        )
        drafts.append(PatientDraft(f"D{i + 1:03d}", params, mine, second, seconds, reals))
    changed = sum(sum(v != "N" for v in d.real_verdicts) for d in drafts) + extra_changed
    quotas = filler_quotas(drafts, changed, gaps, agreements, rng)
    return Design(cells, [d.params for d in drafts], drafts, quotas)
