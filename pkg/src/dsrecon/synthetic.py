"""Synthetic corpora with scripted model behaviour.

A :class:`CorpusBlueprint` fixes everything about a corpus ahead of time:
the FHIR records, the raw message logs, the scenario dialogues, which
facts the patient states, and how each scripted model stage will react.
:func:`build_corpus` then runs the ordinary corpus pipeline (segmentation,
bundle matching, two-call scenario generation, interleaving) against a
:class:`ScriptedGateway` driven by :class:`PlanResponder`.

The responder only looks at request text, like a real model would. The
extraction stage resolves memory ids from the extraction view in its
prompt, the event judge compares the ground truth against the memory
listing it is shown, and so on.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Any, Callable, Iterable

from .catalog import PatientRecord, to_bundle
from .corpus import HybridTranscript, Scenario, Session
from .dataset import (
    BundleCandidate,
    Message,
    PatientProfile,
    annotate,
    assign_synthetic_dates,
    build_hybrid_transcript,
    generate_scenario_session,
    score_bundle_candidates,
    segment_messages,
)
from .fhir_ingest import DEFAULT_BUDGET, CuratedSummary, curate, parse_bundle
from .llm_gateway import AuditLog, ChatRequest, ScriptedFixture, ScriptedGateway
from .narrative_memory import normalize
from .schemas import EMPTY_DELTA

# --------------------------------------------------------------------------
# Text generation
# --------------------------------------------------------------------------

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
MONTHS = ("January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December")
RELATIVES = ("daughter", "son", "grandson", "granddaughter", "niece", "nephew", "sister", "brother", "cousin", "best friend")
NAMES = ("Maya", "Jordan", "Luis", "Aisha", "Tom", "Keisha", "Marco", "Grace", "Andre", "Rosa", "Devon", "Lily", "Omar", "Nina", "Caleb", "Tia")
PLACES = ("park", "mall", "track at the Y", "neighborhood loop", "church parking lot", "school track", "riverside trail", "community center")
ACTIVITIES = ("yoga", "water aerobics", "line dancing", "cycling", "swimming", "resistance bands", "chair exercises", "pickleball", "gardening", "Zumba")
FOODS = ("sodas", "bags of chips", "sweet teas", "fried meals", "fast food meals", "desserts", "energy drinks")
ITEMS = ("stationary bike", "set of dumbbells", "yoga mat", "step tracker", "treadmill", "pair of walking shoes", "kettlebell")
SHIFTS = ("morning", "evening", "overnight", "weekend", "split")
WORKPLACES = ("hospital", "warehouse", "school", "grocery store", "bank", "call center", "restaurant")
PETS = ("puppy", "rescue dog", "beagle", "terrier")
WEATHER = ("hot", "cold", "rainy", "icy", "windy", "humid")
TRIPS = ("Chicago", "the lake", "Atlanta", "the Smokies", "Disney", "the beach", "Mexico")
SIDE_EFFECTS = ("dizzy", "nauseous", "tired all the time", "lightheaded", "achy", "jittery")
SYMPTOMS = ("flare-ups", "pain", "bad days", "trouble breathing", "swelling", "headaches")

COACH_OPENERS = (
    "Hi! How has your week been going?",
    "Good morning! How did the walks go?",
    "Hey there, checking in. How are you feeling?",
    "Hi! Any wins this week?",
    "Hello! How is the step goal going?",
    "Happy {wd}! How are things?",
)
COACH_FOLLOWUPS = (
    "Thanks for sharing that. How does that affect your plans?",
    "That makes sense. What feels doable this week?",
    "Got it. Anything else going on?",
    "Great to hear. What is your goal for the next few days?",
    "I appreciate you telling me. How are you feeling about it?",
    "Nice work. Want to set something for tomorrow?",
    "Okay! What would help you stay on track?",
)
COACH_CLOSERS = (
    "Sounds like a plan. Talk soon!",
    "Great, I will check in later this week.",
    "Keep it up! Message me anytime.",
    "Thanks! Have a good one.",
)


def long_date(d: date) -> str:
    return f"{MONTHS[d.month - 1]} {d.day}, {d.year}"


@dataclass(frozen=True)
class Fact:
    """One thing a patient says, how it should be remembered, and a lossy rendering of it."""

    utterance: str
    memory: str
    gist: str
    category: str


class TextFactory:
    """Draws patient utterances and memory texts, keeping every string unique corpus-wide."""

    def __init__(self, rng: random.Random) -> None:
        self.rng = rng
        self.utterances: set[str] = set()
        self.contents: set[str] = set()

    # -- uniqueness ---------------------------------------------------------

    def _fresh(self, make: Callable[[], Fact], tries: int = 400) -> Fact:
        for _ in range(tries):
            f = make()
            keys = {normalize(f.memory), normalize(f.gist)}
            if f.utterance in self.utterances or len(keys) < 2 or keys & self.contents:
                continue
            self.utterances.add(f.utterance)
            self.contents |= keys
            return f
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def _fresh_text(self, make: Callable[[], str], tries: int = 400) -> str:
        for _ in range(tries):
            t = make()
            if t not in self.utterances:
                self.utterances.add(t)
                return t
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def _fresh_content(self, make: Callable[[], str], tries: int = 400) -> str:
        for _ in range(tries):
            t = make()
            if normalize(t) not in self.contents:
                self.contents.add(normalize(t))
                return t
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def coach(self, pool: tuple[str, ...]) -> str:
        return self.rng.choice(pool).replace("{wd}", self.rng.choice(WEEKDAYS))

    # -- coaching facts (no clinical content) --------------------------------

    def coaching_fact(self, when: date) -> Fact:
        r = self.rng
        d = long_date(when)

        def make() -> Fact:
            kind = r.randrange(12)
            wd, wd2 = r.sample(WEEKDAYS, 2)
            n = r.randrange(3000, 12001, 250)
            name, rel, place = r.choice(NAMES), r.choice(RELATIVES), r.choice(PLACES)
            month, act = r.choice(MONTHS), r.choice(ACTIVITIES)
            if kind == 0:
                return Fact(
                    f"I'm going to aim for {n:,} steps a day starting {wd}.",
                    f"Patient set a goal of {n:,} steps per day starting {wd} ({d})",
                    f"Patient set a new daily step goal ({d})",
                    "lifestyle",
                )
            if kind == 1:
                h = r.randint(5, 8)
                return Fact(
                    f"I'll walk at the {place} on {wd} and {wd2} around {h} o'clock.",
                    f"Patient plans to walk at the {place} on {wd}s and {wd2}s around {h} o'clock",
                    f"Patient plans to walk at the {place} on {wd}s",
                    "lifestyle",
                )
            if kind == 2:
                return Fact(
                    f"My {rel} {name} is getting married in {month}, I want to feel good for that.",
                    f"Patient's {rel} {name} is getting married in {month}; this motivates the patient",
                    f"Patient has a family wedding coming up in {month} ({d})",
                    "fact",
                )
            if kind == 3:
                h = r.randint(6, 10)
                return Fact(
                    f"Please text me before {h} in the morning, I'm busy with {name} after that.",
                    f"Patient prefers coaching messages before {h} am because they care for {name} afterwards",
                    f"Patient prefers morning messages ({d})",
                    "preference",
                )
            if kind == 4:
                m = r.randint(10, 75)
                return Fact(
                    f"I did {m} minutes of {act} on {wd}.",
                    f"Patient did {m} minutes of {act} on {wd} ({d})",
                    f"Patient did some {act} on {wd} ({d})",
                    "lifestyle",
                )
            if kind == 5:
                food = r.choice(FOODS)
                a, b = sorted(r.sample(range(1, 15), 2))
                return Fact(
                    f"I'm down to {a} {food} a week, I used to have {b}.",
                    f"Patient cut back from {b} to {a} {food} per week ({d})",
                    f"Patient is cutting back on {food} ({d})",
                    "lifestyle",
                )
            if kind == 6:
                item, cost = r.choice(ITEMS), r.randrange(20, 400, 5)
                return Fact(
                    f"I bought a {item} for ${cost} so I can work out at home.",
                    f"Patient bought a {item} for ${cost} to exercise at home",
                    f"Patient bought home exercise equipment ({d})",
                    "fact",
                )
            if kind == 7:
                c = r.randint(3, 10)
                return Fact(
                    f"Honestly I'm about a {c} out of 10 on hitting it this week, {wd} will be tough.",
                    f"Patient rates confidence in reaching this week's goal as {c}/10; expects {wd} to be hard ({d})",
                    f"Patient gave a confidence rating for this week's goal ({d})",
                    "fact",
                )
            if kind == 8:
                shift, work, hrs = r.choice(SHIFTS), r.choice(WORKPLACES), r.randint(4, 12)
                return Fact(
                    f"I switched to the {shift} shift at the {work}, {hrs} hours a day now.",
                    f"Patient now works the {shift} shift at the {work}, {hrs} hours a day",
                    f"Patient changed work shifts at the {work}",
                    "fact",
                )
            if kind == 9:
                pet, k = r.choice(PETS), r.randint(2, 4)
                return Fact(
                    f"We got a {pet} named {name}, so I'll be walking {k} times a day!",
                    f"Patient got a {pet} named {name} and plans to walk it {k} times a day",
                    f"Patient got a new {pet} ({d})",
                    "fact",
                )
            if kind == 10:
                w = r.choice(WEATHER)
                return Fact(
                    f"It's been too {w} to walk outside, I only managed {n:,} steps on {wd}.",
                    f"Patient managed only {n:,} steps on {wd} because it was too {w} outside ({d})",
                    f"Patient had trouble walking outside due to {w} weather ({d})",
                    "lifestyle",
                )
            trip = r.choice(TRIPS)
            return Fact(
                f"I want to keep up with my {rel} {name} when we go to {trip} in {month}.",
                f"Patient wants to keep up with their {rel} {name} on a trip to {trip} in {month}",
                f"Patient is planning a trip in {month} ({d})",
                "fact",
            )

        return self._fresh(make)

    def context_fact(self, when: date) -> Fact:
        """Second statement in a scenario session: routine goal talk."""
        r = self.rng
        d = long_date(when)

        def make() -> Fact:
            n = r.randrange(2000, 10001, 250)
            wd = r.choice(WEEKDAYS)
            if r.random() < 0.5:
                return Fact(
                    f"Once this settles I want to get back to {n:,} steps a day, maybe by {wd}.",
                    f"Patient wants to get back to {n:,} steps per day, possibly by {wd} ({d})",
                    f"Patient wants to increase walking again ({d}, {wd})",
                    "lifestyle",
                )
            act = r.choice(ACTIVITIES)
            m = r.randint(10, 45)
            return Fact(
                f"For now I'll stick to {m} minutes of {act} on {wd}.",
                f"Patient plans {m} minutes of {act} on {wd} for now ({d})",
                f"Patient plans some {act} this week ({d}, {wd})",
                "lifestyle",
            )

        return self._fresh(make)

    def chatter(self, when: date) -> tuple[str, str]:
        """A patient message with no ground-truth event and a loggable memory for it."""
        r = self.rng
        d = long_date(when)

        def make() -> tuple[str, str]:
            kind = r.randrange(5)
            n = r.randrange(1500, 15001, 10)
            if kind == 0:
                return f"Got {n:,} steps today, feeling good.", f"Patient walked {n:,} steps on {d}"
            if kind == 1:
                m = r.randint(5, 90)
                return f"Did {m} active minutes, not bad!", f"Patient logged {m} active minutes on {d}"
            if kind == 2:
                k = r.randint(2, 60)
                return f"That makes {k} days in a row of walking.", f"Patient's walking streak reached {k} days ({d})"
            if kind == 3:
                place = r.choice(PLACES)
                mi = r.randint(1, 6) + r.choice((0, 0.5))
                return f"Walked {mi} miles around the {place}.", f"Patient walked {mi} miles around the {place} on {d}"
            act = r.choice(ACTIVITIES)
            m = r.randint(5, 60)
            return f"Squeezed in {m} minutes of {act} after work.", f"Patient did {m} minutes of {act} after work on {d}"

        for _ in range(400):
            u, mem = make()
            if u not in self.utterances and normalize(mem) not in self.contents:
                self.utterances.add(u)
                self.contents.add(normalize(mem))
                return u, mem
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def symptom_chatter(self, when: date, condition: str | None) -> tuple[str, str]:
        """Chatter that mentions a bodily complaint; a reconciler flags these as gaps."""
        r = self.rng
        d = long_date(when)

        def make() -> tuple[str, str]:
            m = r.randint(5, 90)
            part = r.choice(("knees", "back", "feet", "hips", "shoulders", "ankles"))
            if condition and r.random() < 0.5:
                return (
                    f"My {condition} bothered me after {m} minutes of walking.",
                    f"Patient's {condition} bothered them after {m} minutes of walking ({d})",
                )
            return (
                f"My {part} ached after {m} minutes of walking.",
                f"Patient's {part} ached after {m} minutes of walking ({d})",
            )

        for _ in range(400):
            u, mem = make()
            if u not in self.utterances and normalize(mem) not in self.contents:
                self.utterances.add(u)
                self.contents.add(normalize(mem))
                return u, mem
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def medication_chatter(self, when: date, medication: str) -> tuple[str, str]:
        """A remark that restates a documented medication."""
        r = self.rng
        d = long_date(when)

        def make() -> tuple[str, str]:
            meal = r.choice(("breakfast", "lunch", "dinner"))
            return (
                f"I take my {medication} every day with {meal}, never miss it.",
                f"Patient takes {medication} daily with {meal} ({d})",
            )

        for _ in range(400):
            u, mem = make()
            if u not in self.utterances and normalize(mem) not in self.contents:
                self.utterances.add(u)
                self.contents.add(normalize(mem))
                return u, mem
        raise RuntimeError("text templates exhausted; widen the slot pools")

    def revision(self, when: date) -> str:
        """New content for an update to an existing logged memory."""
        r = self.rng
        d = long_date(when)

        def make() -> str:
            kind = r.randrange(3)
            if kind == 0:
                return f"Patient's walking streak is now {r.randint(3, 120)} days ({d})"
            if kind == 1:
                return f"Patient's usual route is now the {r.choice(PLACES)}, about {r.randint(1, 5)} miles ({d})"
            return f"Patient now averages {r.randrange(2000, 14001, 10):,} steps per day ({d})"

        return self._fresh_content(make)

    def closer(self) -> str:
        r = self.rng

        def make() -> str:
            return (
                f"Thanks coach, I'll check in {r.choice(WEEKDAYS)} after my "
                f"{r.randint(5, 90)} minute {r.choice(('walk', 'stretch', 'bike ride', 'swim', 'class'))}."
            )

        return self._fresh_text(make)

    def filler_turn(self) -> str:
        r = self.rng

        def make() -> str:
            return (
                f"{r.choice(('Okay', 'Sure', 'Sounds good', 'Will do', 'Haha okay', 'Yes'))}, "
                f"{r.choice(('talk', 'chat', 'see you', 'catch you'))} {r.choice(WEEKDAYS)} "
                f"{r.choice(('morning', 'afternoon', 'evening', 'night'))}! {r.choice(('', ':)', '!!', ' Thanks.'))}".strip()
                + f" #{r.randint(1, 99)}"
            )

        return self._fresh_text(make)

    # -- clinical statements for scenarios ----------------------------------

    def clinical_fact(self, rtype: str, expected_type: str, name: str, when: date, extra: str = "") -> Fact:
        """The scenario's key statement about the item called ``name`` and a lossy version without the clinical detail."""
        r = self.rng
        d = long_date(when)

        def make() -> Fact:
            n = r.randint(2, 21)
            wd = r.choice(WEEKDAYS)
            if rtype == "MedicationRequest":
                if expected_type == "contradiction":
                    side = r.choice(SIDE_EFFECTS)
                    return Fact(
                        f"Honestly I stopped taking the {name} about {n} days ago, it was making me {side}.",
                        f"Patient stopped taking {name} about {n} days ago because it made them {side} (reported {d})",
                        f"Patient has felt {side} on and off for about {n} days ({d})",
                        "medication",
                    )
                day = r.randint(1, 28)
                return Fact(
                    f"I've only been taking my {name} every other day so it lasts until my refill on the {day}th.",
                    f"Patient takes {name} every other day to stretch the supply until the refill on the {day}th (reported {d})",
                    f"Patient is waiting on a prescription refill due on the {day}th ({d})",
                    "medication",
                )
            if rtype == "Condition":
                if expected_type == "contradiction":
                    return Fact(
                        f"The doctor told me the {name} cleared up years ago, so I don't worry about it. Walked {n * 5} minutes {wd}.",
                        f"Patient believes their {name} cleared up years ago and no longer has it (reported {d})",
                        f"Patient walked {n * 5} minutes on {wd} and feels fine ({d})",
                        "health",
                    )
                sym = r.choice(SYMPTOMS)
                return Fact(
                    f"My {name} has been acting up, I had {sym} for {n} days so I skipped my walks.",
                    f"Patient had {sym} from their {name} for {n} days and skipped walks (reported {d})",
                    f"Patient skipped walks for {n} days ({d})",
                    "health",
                )
            if rtype == "AllergyIntolerance":
                if expected_type == "contradiction":
                    return Fact(
                        f"I'm not really allergic to {name}, I had some at a cookout {n} days ago and was fine.",
                        f"Patient says they are not allergic to {name} and had some {n} days ago without a reaction (reported {d})",
                        f"Patient went to a cookout {n} days ago ({d})",
                        "health",
                    )
                return Fact(
                    f"I broke out in hives from {name} at my {r.choice(RELATIVES)}'s party {n} days ago.",
                    f"Patient had hives after exposure to {name} at a party {n} days ago (reported {d})",
                    f"Patient went to a family party {n} days ago ({d})",
                    "health",
                )
            if rtype == "Immunization":
                if expected_type == "contradiction":
                    return Fact(
                        f"I don't think I've ever had a {name} shot, I always skip those. Got {n * 500:,} steps {wd} though.",
                        f"Patient says they have never received a {name} vaccine (reported {d})",
                        f"Patient got {n * 500:,} steps on {wd} ({d})",
                        "health",
                    )
                return Fact(
                    f"My arm is still sore from the {name} shot {n} days ago, so I'm walking instead of lifting.",
                    f"Patient has arm soreness from a {name} vaccine {n} days ago and is walking instead of lifting weights (reported {d})",
                    f"Patient is walking instead of lifting weights for {n} days ({d})",
                    "health",
                )
            if rtype == "CarePlan":
                if expected_type == "contradiction":
                    return Fact(
                        f"Nobody ever gave me a {name} plan, I just do what I want. Walked {n} laps at the mall {wd}.",
                        f"Patient says they were never given a {name} plan (reported {d})",
                        f"Patient walked {n} laps at the mall on {wd} ({d})",
                        "health",
                    )
                shift = r.choice(SHIFTS)
                return Fact(
                    f"I can't really stick to the {name} with my {shift} shifts, maybe {min(n, 6)} days a week at most.",
                    f"Patient cannot follow the {name} because of {shift} work shifts; manages {min(n, 6)} days a week at most (reported {d})",
                    f"Patient works {shift} shifts and is busy {min(n, 6)} days a week ({d})",
                    "health",
                )
            if rtype == "Observation":
                reading = extra or f"{n * 7}"
                if expected_type == "contradiction":
                    return Fact(
                        f"My {name} is always normal, like {reading}, whatever the chart says.",
                        f"Patient states their {name} is always normal, around {reading} (reported {d})",
                        f"Patient says their numbers are usually fine ({d}, {wd})",
                        "health",
                    )
                return Fact(
                    f"The pharmacy machine said my {name} was {reading} on {wd}, pretty high for me.",
                    f"Patient reports a {name} reading of {reading} at the pharmacy on {wd} (reported {d})",
                    f"Patient stopped by the pharmacy on {wd} ({d})",
                    "health",
                )
            if rtype == "Procedure":
                if expected_type == "contradiction":
                    return Fact(
                        f"I never actually had the {name}, I cancelled it. Did {n * 3} squats today.",
                        f"Patient says they cancelled and never had the {name} (reported {d})",
                        f"Patient did {n * 3} squats on {d}",
                        "health",
                    )
                return Fact(
                    f"I'm still healing from the {name} I had {n} weeks ago so I'm keeping walks short.",
                    f"Patient is recovering from a {name} {n} weeks ago and keeping walks short (reported {d})",
                    f"Patient is keeping walks short for {n} weeks ({d})",
                    "health",
                )
            raise ValueError(f"no template for {rtype}")

        return self._fresh(make)


# --------------------------------------------------------------------------
# Blueprints
# --------------------------------------------------------------------------

VERDICT_CODES = {"M": "MATCH", "P": "PARTIAL", "N": "NO_MATCH"}


@dataclass
class PlannedEvent:
    fact: Fact
    verdict: str  # M, P or N: what the scripted extractor stores

    @property
    def stored(self) -> str | None:
        return {"M": self.fact.memory, "P": self.fact.gist, "N": None}[self.verdict]


@dataclass
class PatientTurn:
    text: str
    event: PlannedEvent | None = None
    ops: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class SessionPlan:
    """Speaker/text items with minute offsets from ``start``."""

    start: datetime
    items: list[tuple[str, str | PatientTurn]]
    offsets: list[int]


@dataclass
class ScenarioPlan:
    scenario: Scenario
    anchor: int
    items: list[tuple[str, str | PatientTurn]]


@dataclass
class PatientBlueprint:
    record: PatientRecord
    profile: PatientProfile
    decoys: list[PatientRecord]
    sessions: list[SessionPlan]
    scenarios: list[ScenarioPlan]
    faithfulness: int = 5
    deduplication: int = 5

    @property
    def patient_id(self) -> str:
        return self.record.patient_id

    def messages(self) -> list[Message]:
        out = []
        for s in self.sessions:
            for (speaker, item), off in zip(s.items, s.offsets):
                text = item.text if isinstance(item, PatientTurn) else item
                out.append(Message(speaker, text, s.start + timedelta(minutes=off)))
        return out

    def patient_turns(self) -> Iterable[PatientTurn]:
        for s in self.sessions:
            yield from (i for _, i in s.items if isinstance(i, PatientTurn))
        for sc in self.scenarios:
            yield from (i for _, i in sc.items if isinstance(i, PatientTurn))


@dataclass
class CorpusBlueprint:
    patients: list[PatientBlueprint]
    recon: dict[str, dict[str, Any]]
    reference_date: date
    style_exemplars: int = 3


# --------------------------------------------------------------------------
# Scripted model behaviour
# --------------------------------------------------------------------------

NO_FHIR = {
    "contradiction_type": "no_fhir",
    "confidence": 0.9,
    "justification": "Routine coaching content with no specific clinical assertion.",
    "clinical_severity": "low",
    "fhir_resources_considered": [],
}


@dataclass
class ScriptPlan:
    """Lookup tables the scripted model stages consult, all keyed by text found in the prompt."""

    dialogues: dict[str, list[dict[str, str]]] = field(default_factory=dict)
    gt: dict[str, list[dict[str, str]]] = field(default_factory=dict)
    extraction: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    partials: dict[str, str] = field(default_factory=dict)
    recon: dict[str, dict[str, Any]] = field(default_factory=dict)
    transcript_scores: dict[str, tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def from_blueprint(cls, bp: CorpusBlueprint) -> ScriptPlan:
        plan = cls(recon=dict(bp.recon))
        for p in bp.patients:
            plan.transcript_scores[p.patient_id] = (p.faithfulness, p.deduplication)
            for sc in p.scenarios:
                plan.dialogues[sc.scenario.description] = [
                    {"speaker": sp, "text": it.text if isinstance(it, PatientTurn) else it} for sp, it in sc.items
                ]
            for turn in p.patient_turns():
                ops = []
                if turn.event is not None:
                    f = turn.event.fact
                    plan.gt[turn.text] = [{"utterance": turn.text, "memory_content": f.memory, "category": f.category}]
                    plan.partials[f.memory] = f.gist
                    if turn.event.stored is not None:
                        ops.append({"op": "insert", "content": turn.event.stored, "category": f.category})
                ops += turn.ops
                if ops:
                    plan.extraction[turn.text] = ops
        return plan


_VIEW_LINE = re.compile(r"^\[(mem_\d+)\] \((\w+), updated: [^)]*\) (.*)$")
_SESSION_HEADER = re.compile(r"^--- Session (\S+)-[rs]\d{3} ", re.M)


class PlanResponder:
    """Callable for :class:`ScriptedGateway` that answers from a :class:`ScriptPlan`."""

    def __init__(self, plan: ScriptPlan) -> None:
        self.plan = plan

    def __call__(self, request: ChatRequest) -> dict[str, Any]:
        return getattr(self, f"_{request.schema_id}")(request.user_text)

    def _memory_delta(self, text: str) -> dict[str, Any]:
        view, _, dialogue = text.partition("\n\nCONVERSATION:\n")
        last = dialogue.rsplit("\n", 1)[-1]
        if not last.startswith("patient: "):
            return dict(EMPTY_DELTA)
        ops = self.plan.extraction.get(last[len("patient: "):], [])
        ids = {}
        for line in view.splitlines():
            m = _VIEW_LINE.match(line)
            if m:
                ids[m.group(3)] = m.group(1)
        delta: dict[str, list] = {"inserts": [], "updates": [], "deletes": []}
        for op in ops:
            if op["op"] == "insert":
                delta["inserts"].append({"content": op["content"], "category": op["category"]})
            elif op["op"] == "update":
                delta["updates"].append(
                    {"memory_id": ids[op["target"]], "new_content": op["content"], "category": op["category"]}
                )
            else:
                delta["deletes"].append({"memory_id": ids[op["target"]], "justification": op.get("justification", "")})
        return delta

    def _judge_event(self, text: str) -> dict[str, Any]:
        expected = re.search(r'This should have been remembered as: "(.*)"\n', text).group(1)
        block = text.split("in\ntime:\n\n", 1)[1].split("\n\n## Task", 1)[0]
        listed = {normalize(ln[2:]) for ln in block.splitlines() if ln.startswith("- ")}
        if normalize(expected) in listed:
            return {"verdict": "MATCH", "content_fidelity": 5, "reasoning": "Stored as stated."}
        gist = self.plan.partials.get(expected)
        if gist is not None and normalize(gist) in listed:
            return {"verdict": "PARTIAL", "content_fidelity": 3, "reasoning": "Gist kept, key detail missing."}
        return {"verdict": "NO_MATCH", "content_fidelity": None, "reasoning": "Not found in any memory."}

    def _judge_transcript(self, text: str) -> dict[str, Any]:
        m = _SESSION_HEADER.search(text)
        faith, dedup = self.plan.transcript_scores.get(m.group(1) if m else "", (5, 5))
        return {
            "faithfulness": {"score": faith, "reasoning": ""},
            "deduplication": {"score": dedup, "reasoning": ""},
            "overall_notes": "",
        }

    def _reconciliation_result(self, text: str) -> dict[str, Any]:
        content = re.search(r'Content: "(.*)"\nCategory:', text).group(1)
        return dict(self.plan.recon.get(content, NO_FHIR))

    def _scenario_session(self, text: str) -> dict[str, Any]:
        description = text.split("## Scenario\n", 1)[1].split("\n", 1)[0]
        return {"turns": self.plan.dialogues[description]}

    def _gt_events(self, text: str) -> dict[str, Any]:
        events = []
        for m in re.finditer(r"^\[(\d+)\] patient: (.*)$", text, re.M):
            for ev in self.plan.gt.get(m.group(2), []):
                events.append({"turn_index": int(m.group(1)), **ev})
        return {"events": events}


def scripted_gateway(plan: ScriptPlan, audit: AuditLog | None = None) -> ScriptedGateway:
    return ScriptedGateway(ScriptedFixture(), responder=PlanResponder(plan), audit=audit)


# --------------------------------------------------------------------------
# Corpus build
# --------------------------------------------------------------------------


@dataclass
class BuiltCorpus:
    bundles: dict[str, dict]
    summaries: dict[str, CuratedSummary]
    transcripts: list[HybridTranscript]
    scenarios: list[Scenario]
    messages: dict[str, list[Message]]
    audit: AuditLog
    selection: dict[str, list[tuple[str, float]]]


def build_corpus(
    blueprint: CorpusBlueprint,
    gateway: ScriptedGateway | None = None,
    budget: tuple[int, int] = DEFAULT_BUDGET,
) -> BuiltCorpus:
    """Run segmentation, bundle matching and two-call scenario generation for every patient."""
    audit = gateway.audit if gateway is not None else AuditLog()
    gw = gateway or scripted_gateway(ScriptPlan.from_blueprint(blueprint), audit)
    bundles, summaries, messages, selection = {}, {}, {}, {}
    transcripts, scenarios = [], []
    for p in blueprint.patients:
        pid = p.patient_id
        msgs = p.messages()
        messages[pid] = msgs
        real = segment_messages(msgs, pid)
        if len(real) != len(p.sessions):
            raise RuntimeError(f"{pid}: planned {len(p.sessions)} sessions, segmentation found {len(real)}")

        candidates = {rec.patient_id: to_bundle(rec) for rec in [p.record, *p.decoys]}
        ranked = score_bundle_candidates(
            p.profile,
            [BundleCandidate.from_bundle(b, blueprint.reference_date, cid) for cid, b in sorted(candidates.items())],
        )
        selection[pid] = [(c.patient_id, c.score) for c in ranked]
        if ranked[0].patient_id != pid:
            raise RuntimeError(f"{pid}: bundle matching picked {ranked[0].patient_id}")
        bundle = candidates[pid]
        bundles[pid] = bundle
        summary = curate(parse_bundle(bundle, pid), budget)
        summaries[pid] = summary

        exemplars = [m.text for m in msgs if m.speaker == "patient"][: blueprint.style_exemplars]
        dates = assign_synthetic_dates(real, [sc.anchor for sc in p.scenarios])
        synthetic: list[Session] = []
        for sc, when in zip(p.scenarios, dates):
            session = generate_scenario_session(gw, sc.scenario, summary, exemplars, when)
            synthetic.append(annotate(gw, session))
            scenarios.append(sc.scenario)
        real = [annotate(gw, s) for s in real]
        transcripts.append(build_hybrid_transcript(pid, real, synthetic))
    return BuiltCorpus(bundles, summaries, transcripts, scenarios, messages, audit, selection)
