"""The narrative stream: a per-patient store of patient-reported memories.

Memories change only through :meth:`MemoryStore.apply_delta`. Every applied
operation is appended to an operation log; snapshots are log positions and
are rebuilt by replaying that prefix, so long replays do not hold full
copies of the store at every turn.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

CATEGORIES = ("preference", "health", "lifestyle", "medication", "fact")
NO_MEMORIES = "(no existing memories)"


def normalize(content: str) -> str:
    """Key used by the exact-match duplicate guard."""
    return " ".join(content.casefold().split())


@dataclass(frozen=True)
class MemoryRecord:
    memory_id: str
    content: str
    category: str
    created_at: str
    updated_at: str
    source_session: str

    def __post_init__(self) -> None:
        if not self.content.strip():
            raise ValueError("memory content must be non-empty")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.updated_at < self.created_at:
            raise ValueError("updated_at precedes created_at")


@dataclass
class MemoryInsert:
    content: str
    category: str


@dataclass
class MemoryUpdate:
    memory_id: str
    new_content: str
    category: str


@dataclass
class MemoryDelete:
    memory_id: str
    justification: str = ""


@dataclass
class MemoryDelta:
    inserts: list[MemoryInsert] = field(default_factory=list)
    updates: list[MemoryUpdate] = field(default_factory=list)
    deletes: list[MemoryDelete] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MemoryDelta:
        return cls(
            inserts=[MemoryInsert(i["content"], i["category"]) for i in d.get("inserts", [])],
            updates=[
                MemoryUpdate(u["memory_id"], u["new_content"], u["category"])
                for u in d.get("updates", [])
            ],
            deletes=[
                MemoryDelete(x["memory_id"], x.get("justification", "")) for x in d.get("deletes", [])
            ],
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def __len__(self) -> int:
        return len(self.inserts) + len(self.updates) + len(self.deletes)


@dataclass
class ApplyReport:
    applied: list[tuple[str, str]] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)
    changed: list[MemoryRecord] = field(default_factory=list)
    coerced: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "applied": [list(a) for a in self.applied],
            "rejected": [list(r) for r in self.rejected],
            "changed": [asdict(m) for m in self.changed],
            "coerced": list(self.coerced),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ApplyReport:
        return cls(
            applied=[tuple(a) for a in d["applied"]],
            rejected=[tuple(r) for r in d["rejected"]],
            changed=[MemoryRecord(**m) for m in d["changed"]],
            coerced=list(d.get("coerced", [])),
        )


# Log entries: ("put", MemoryRecord) or ("del", memory_id)
_LogEntry = tuple


@dataclass(frozen=True)
class MemorySnapshot:
    """Immutable view of a store at one point in its history."""

    patient_id: str
    _log: list = field(repr=False, compare=False)
    length: int
    next_id: int

    def records(self) -> list[MemoryRecord]:
        state: dict[str, MemoryRecord] = {}
        for kind, payload in self._log[: self.length]:
            if kind == "put":
                state[payload.memory_id] = payload
            else:
                state.pop(payload, None)
        return _ordered(state.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemorySnapshot):
            return NotImplemented
        return (self.patient_id, self.next_id, self.records()) == (
            other.patient_id,
            other.next_id,
            other.records(),
        )

    def __hash__(self) -> int:
        return hash((self.patient_id, self.length, self.next_id))


def _ordered(records: Iterable[MemoryRecord]) -> list[MemoryRecord]:
    return sorted(records, key=lambda r: (r.created_at, r.memory_id))


class MemoryStore:
    """Mutable narrative memory for one patient.

    IDs are ``mem_`` plus a zero-padded counter and are never reused, even
    after a delete.
    """

    def __init__(self, patient_id: str = "patient") -> None:
        self.patient_id = patient_id
        self._records: dict[str, MemoryRecord] = {}
        self._by_norm: dict[str, str] = {}
        self._next = 1
        self._log: list[_LogEntry] = []

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, memory_id: object) -> bool:
        return memory_id in self._records

    def get(self, memory_id: str) -> MemoryRecord | None:
        return self._records.get(memory_id)

    def records(self) -> list[MemoryRecord]:
        return _ordered(self._records.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return (self.patient_id, self._next, self.records()) == (
            other.patient_id,
            other._next,
            other.records(),
        )

    # -- mutation --------------------------------------------------------

    def _new_id(self) -> str:
        mid = f"mem_{self._next:03d}"
        self._next += 1
        return mid

    def _put(self, rec: MemoryRecord, old: MemoryRecord | None = None) -> None:
        if old is not None:
            del self._by_norm[normalize(old.content)]
        self._records[rec.memory_id] = rec
        self._by_norm[normalize(rec.content)] = rec.memory_id
        self._log.append(("put", rec))

    def _insert(
        self, content: str, category: str, session_id: str, session_date: str, report: ApplyReport
    ) -> MemoryRecord | None:
        if not content.strip():
            report.rejected.append(("insert", "empty-content"))
            return None
        if category not in CATEGORIES:
            report.rejected.append(("insert", "invalid-category"))
            return None
        if normalize(content) in self._by_norm:
            report.rejected.append(("insert", "exact-duplicate"))
            return None
        rec = MemoryRecord(self._new_id(), content, category, session_date, session_date, session_id)
        self._put(rec)
        report.applied.append(("insert", rec.memory_id))
        return rec

    def apply_delta(self, delta: MemoryDelta, session_id: str, session_date: str) -> ApplyReport:
        """Apply one turn's delta: deletes, then updates, then inserts."""
        report = ApplyReport()
        touched: dict[str, None] = {}

        for d in delta.deletes:
            rec = self._records.pop(d.memory_id, None)
            if rec is None:
                report.rejected.append(("delete", "unknown-id"))
                continue
            del self._by_norm[normalize(rec.content)]
            self._log.append(("del", rec.memory_id))
            report.applied.append(("delete", rec.memory_id))
            touched.pop(rec.memory_id, None)

        for u in delta.updates:
            old = self._records.get(u.memory_id)
            if old is None:
                rec = self._insert(u.new_content, u.category, session_id, session_date, report)
                if rec is not None:
                    report.coerced.append(rec.memory_id)
                    touched[rec.memory_id] = None
                continue
            if not u.new_content.strip():
                report.rejected.append(("update", "empty-content"))
                continue
            if u.category not in CATEGORIES:
                report.rejected.append(("update", "invalid-category"))
                continue
            owner = self._by_norm.get(normalize(u.new_content))
            if owner is not None and owner != old.memory_id:
                report.rejected.append(("update", "exact-duplicate"))
                continue
            rec = MemoryRecord(
                old.memory_id,
                u.new_content,
                u.category,
                old.created_at,
                max(session_date, old.created_at),
                old.source_session,
            )
            self._put(rec, old)
            report.applied.append(("update", rec.memory_id))
            touched[rec.memory_id] = None

        for i in delta.inserts:
            rec = self._insert(i.content, i.category, session_id, session_date, report)
            if rec is not None:
                touched[rec.memory_id] = None

        report.changed = [self._records[m] for m in touched if m in self._records]
        return report

    # -- snapshots -------------------------------------------------------

    def snapshot(self) -> MemorySnapshot:
        return MemorySnapshot(self.patient_id, self._log, len(self._log), self._next)

    @classmethod
    def restore(cls, snap: MemorySnapshot) -> MemoryStore:
        store = cls(snap.patient_id)
        for rec in snap.records():
            store._records[rec.memory_id] = rec
            store._by_norm[normalize(rec.content)] = rec.memory_id
            store._log.append(("put", rec))
        store._next = snap.next_id
        return store

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "patient_id": self.patient_id,
                "next_id": self._next,
                "records": [asdict(r) for r in self.records()],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> MemoryStore:
        d = json.loads(text)
        store = cls(d["patient_id"])
        for r in d["records"]:
            rec = MemoryRecord(**r)
            store._records[rec.memory_id] = rec
            store._by_norm[normalize(rec.content)] = rec.memory_id
            store._log.append(("put", rec))
        store._next = d["next_id"]
        return store


def extraction_view(store: MemoryStore | MemorySnapshot) -> str:
    """ID-bearing listing the extraction model edits against."""
    records = store.records()
    if not records:
        return NO_MEMORIES
    return "\n".join(
        f"[{r.memory_id}] ({r.category}, updated: {r.updated_at}) {r.content}" for r in records
    )


def clean_view(store: MemoryStore | MemorySnapshot) -> str:
    """Category-grouped listing without IDs or dates."""
    records = store.records()
    blocks = []
    for cat in CATEGORIES:
        lines = [f"- {r.content}" for r in records if r.category == cat]
        if lines:
            blocks.append("\n".join([f"{cat.upper()}:"] + lines))
    return "\n\n".join(blocks)
