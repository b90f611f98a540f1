"""Prompt texts.

The extraction, reconciliation and judge prompts are reproduced exactly as
published, including their line breaks. Templates use ``{name}`` placeholders
that are filled with :func:`fill`, never ``str.format`` (the judge templates
contain literal JSON braces).
"""

from __future__ import annotations

EXTRACTION_SYSTEM_PROMPT = """\
Extract important information from the conversation to
remember for future sessions.

=== CORE PRINCIPLE: STABLE FACTS vs. EVOLVING STATE ===

Every piece of information falls into one of three types.
The type determines whether it gets its own memory or is
consolidated with others.

**Stable facts** — things about the patient that remain
true regardless of how their goals change. Each stable
fact gets its OWN separate memory. NEVER fold a stable
fact into a larger evolving-state memory, because it will
be lost when that memory updates.
Examples of stable fact categories (DO NOT use these
specific examples as extracted memories — only extract
what the patient actually says):
- Equipment owned (e.g., exercise equipment at home)
- Job or daily routine context (e.g., active job that
  contributes to step count)
- Exercise habits or repertoire beyond the current goal
- Preferences (e.g., communication preferences, coaching
  style preferences)
- Preferred locations for activity
- Coping strategies or backup plans

**Evolving state** — things that change over time. These
belong in a single memory per topic that gets UPDATED as
the state changes. Include brief progression history.
Examples of evolving state:
- Current goal, target days, confidence level, and active
  barriers — all in one memory, updated each time any of
  these change
- When the goal changes, update the existing memory to
  reflect the new goal while noting the progression

**Significant events** — notable things that happened at
a specific point in time. Each gets its own memory with
the date.
Examples of significant events:
- Illness or injury that affected the program
- Travel or time away
- Life events that disrupted routine

IMPORTANT: Only extract information the patient actually
stated in the conversation. NEVER insert information from
these instructions or examples.

**Key test**: If the patient's current goal changes next
week, would this fact STILL be true? If yes -> stable
fact -> separate memory. If no -> evolving state ->
update the existing goal memory.

=== DATES ON EVERYTHING ===

Every memory must include a date indicating when the
information was first reported or last changed. The
session date is provided — use it.

- Stable facts: include the date first mentioned,
  e.g., "(reported [session date])"
- Evolving state: include the date of the latest change,
  e.g., "as of [session date] (changed from X)"
- Events: include when it happened,
  e.g., "[description] on/around [session date]"
- NEVER use relative time ("last week", "yesterday")
  without an absolute date.

=== WHEN TO UPDATE vs. INSERT vs. DELETE vs. NO CHANGE ===

- Evolving state changed -> add an UPDATE with the
  existing memory's memory_id
- New stable fact or new event -> add an INSERT
- Two existing memories overlap on the same evolving
  state -> UPDATE one, DELETE the other
- Nothing new -> return empty lists for all three
  operations

UPDATE and DELETE operations MUST reference a valid
memory_id from the existing memories list. Do NOT
fabricate IDs. If you want to modify a memory but cannot
find its ID, use INSERT instead.

=== DUPLICATE PREVENTION ===

Before adding an INSERT, carefully scan the EXISTING
MEMORIES list above. If an existing memory already
captures the same fact, preference, or event — even if
worded slightly differently — do NOT insert a duplicate.
Instead:
- If the existing memory is accurate and complete ->
  do nothing (return empty lists)
- If the existing memory needs updating -> use UPDATE
  with its memory_id

Never insert a new memory for evolving state that an
existing memory already tracks. But DO insert separate
memories for new stable facts, even if they are
thematically related to an existing evolving-state memory.

=== EVOLVING STATE GRANULARITY ===

For evolving state, group closely-coupled fields into one
memory. Keep unrelated state separate.

- GOOD: One memory for "current step goal + target days +
  confidence + active barriers" — these change together
  and form a coherent program snapshot.
- BAD: Separate memories for "step goal is 5,000" and
  "goal days are Mon/Wed/Thu" and "confidence is 10/10"
  — these are tightly coupled state about the same
  program.
- BAD: One memory combining "step goal state" and
  "dietary goal state" — these are independent evolving
  states.

Summarize trends rather than listing individual data
points: "consistently exceeds goal, typically 6K-9K
daily steps" NOT each day's count.

=== FAITHFULNESS ===

- Preserve the user's original meaning. Record what they
  said, not a reinterpretation.
- Aspirations and intentions must stay distinguishable
  from current behavior. "I want to do X" != "does X".
- Only extract information explicitly stated — do not
  infer.

=== CATEGORIES ===

Assign one category per memory (for organization only):
- **preference**: Name/nickname, communication style,
  language preference
- **health**: Symptoms, conditions, physical limitations
- **lifestyle**: Diet, exercise, work schedule, sleep
  patterns, habits
- **medication**: OTC medications, supplements
- **fact**: Other important facts

=== NO CHANGES ===

If the conversation contains NO new information worth
remembering, return empty lists for inserts, updates,
and deletes.
"""

RECONCILIATION_TEMPLATE = """\
You are a clinical reconciliation engine. Given a
patient's memory from a health coaching conversation and
their clinical record summary, determine whether there is
a clinically relevant discrepancy.

## Patient Memory
Content: "{content}"
Category: {category}

## Clinical Record Summary
{clinical_summary}

## Classification Types

- **contradiction**: The memory directly conflicts with
  the clinical record. Example: patient denies a
  documented allergy, claims they stopped a medication
  that is still active, or denies a diagnosed condition.

- **gap_patient**: The memory contains a specific
  clinical assertion that is absent from the clinical
  record AND is clinically actionable. This includes:
  undocumented medications or supplements the patient is
  taking, unreported symptoms, self-reported condition
  changes (e.g., "my anemia resolved years ago" when
  FHIR still shows active), or a specific activity plan
  that poses safety risk given their documented
  conditions (e.g., planning HIIT with active cardiac
  disease).

- **agreement**: The memory is consistent with the
  clinical record. The patient's statement aligns with
  or confirms what is documented.

- **no_fhir**: The memory has no specific clinical
  relevance. This is the correct classification for
  routine coaching content: step goals, walking targets,
  exercise schedules, daily routines, confidence levels,
  preferences, communication style, and general lifestyle
  facts. These should be classified as no_fhir even if
  the patient has conditions broadly related to exercise
  or diet (e.g., a step goal is no_fhir even if the
  patient has prediabetes with an exercise therapy care
  plan — the patient is following their plan, not
  conflicting with it). A memory is only clinically
  relevant if it makes a specific assertion about
  medications, symptoms, diagnoses, allergies, a concrete
  activity that is contraindicated by their conditions,
  or a specific barrier to following a named clinical
  recommendation (e.g., "can't follow the DASH diet due
  to work schedule" references a specific care plan and
  is gap_patient, but "too busy to walk today" is
  no_fhir).

## Instructions
1. First, determine if the memory has specific clinical
   relevance. If it describes routine coaching activity
   (goals, steps, preferences, schedules, barriers),
   classify as no_fhir and stop — do not search for
   tenuous connections to care plans or conditions.
2. If clinically relevant, compare against the clinical
   summary.
3. Consider data freshness — older clinical records may
   be stale.
4. Assess clinical severity: low, medium, high.
5. For each relevant clinical resource, provide its
   resource_type, code_system, code_value, and display
   exactly as shown in the clinical summary brackets
   [SYSTEM:CODE].
6. Provide a confidence score (0.0-1.0) and brief
   justification.
"""

JUDGE_EVENT_TEMPLATE = """\
You are evaluating whether a memory extraction system
captured a specific piece of information from a coaching
conversation.

## Expected Information (Ground Truth)
The patient said: "{utterance}"
This should have been remembered as: "{memory_content}"

## Memory State After Processing That Utterance
These are ALL memories the system had at that point in
time:

{memories}

## Task
Determine if the expected information is captured in the
memory state. The information may be spread across
multiple memories — that is fine. Look across ALL
memories in combination, not just a single one.

- MATCH: The expected information is fully captured
  across the memory state (may use different words, may
  be split across multiple memories)
- PARTIAL: Only some of the expected information appears
  in the memories (key details are missing entirely, not
  just rephrased)
- NO_MATCH: None of the expected information appears in
  any memory

Respond with valid JSON only, no markdown:
{
  "verdict": "MATCH|PARTIAL|NO_MATCH",
  "content_fidelity": null or 1-5
    (5=perfect capture, 1=barely related),
  "reasoning": "brief explanation"
}
"""

JUDGE_TRANSCRIPT_TEMPLATE = """\
You are evaluating a memory extraction system for a
health coaching application. You will read the full
conversation transcript between a coach and patient,
then evaluate the final memory state the system produced.

## Conversation Transcript
{transcript}

## Final Memory State
{memories}

## Task
Score the memory extraction on these 2 dimensions
(1-5 each):

1. **Faithfulness** (1-5): Are the memories faithful to
   what was actually said? No hallucinated, fabricated,
   or distorted information?
   - 5: All memories accurately reflect the conversation,
     no hallucinations
   - 3: Mostly accurate, some minor distortions or
     unsupported inferences
   - 1: Significant inaccuracies or hallucinated
     information

2. **Deduplication** (1-5): Is there one memory per
   concept? No redundant or overlapping memories?
   - 5: No duplicates, each memory is unique
   - 3: Some overlap but mostly distinct
   - 1: Heavy duplication, same info repeated

Respond with valid JSON only, no markdown:
{
  "faithfulness": { "score": 1-5, "reasoning": "..." },
  "deduplication": { "score": 1-5, "reasoning": "..." },
  "overall_notes": "any additional observations"
}
"""


SCENARIO_DIALOGUE_PROMPT = """\
You write one short text-message check-in between a health coach and a
patient. The patient raises the clinical situation below naturally, as
context for their activity goals, not as an answer to a medical
questionnaire. Match the tone and message length of the style examples.

## Scenario
{scenario}

## Patient clinical record
{clinical_summary}

## Style examples (real coaching messages)
{style_examples}

Return JSON: {"turns": [{"speaker": "coach"|"patient", "text": "..."}]}
Alternate speakers, start with the coach, and give the patient at least two
turns.
"""

GT_EXTRACTION_PROMPT = """\
Read the coaching conversation below. List every piece of information the
patient shared that a coach should remember for future sessions. For each
one, give the index of the patient turn where it was said, the patient's
words, and the memory as it should be stored.

## Conversation
{transcript}

Return JSON: {"events": [{"turn_index": 0, "utterance": "...",
"memory_content": "..."}]}
Return an empty list if nothing is worth remembering.
"""

SCHEMA_NUDGE = "Return valid JSON only, matching the required schema. No markdown."


def fill(template: str, **values: str) -> str:
    """Substitute ``{name}`` placeholders verbatim."""
    out = template
    for key, val in values.items():
        token = "{" + key + "}"
        if token not in template:
            raise KeyError(f"template has no placeholder {token}")
        out = out.replace(token, val)
    return out
