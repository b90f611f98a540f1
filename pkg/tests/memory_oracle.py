"""Independent reference model of the memory-store rules, used as a test oracle.

Written from the rules alone, without reading the store implementation:
deletes apply first, then updates, then inserts; contents are compared
case-insensitively with whitespace collapsed; an update to an unknown id
becomes an insert; a delete of an unknown id is rejected; ids count up and
are never reused.
"""

from __future__ import annotations

import random


def key(text: str) -> str:
    return " ".join(text.lower().split())


class ModelStore:
    def __init__(self) -> None:
        self.rows: dict[int, tuple[str, str]] = {}  # number -> (content, category)
        self.counter = 0

    def ids(self) -> list[str]:
        return [f"mem_{n:03d}" for n in sorted(self.rows)]

    def _taken(self, text: str, ignore: int | None = None) -> bool:
        return any(key(c) == key(text) for n, (c, _) in self.rows.items() if n != ignore)

    def _add(self, text: str, cat: str) -> int | None:
        if not text.strip() or self._taken(text):
            return None
        self.counter += 1
        self.rows[self.counter] = (text, cat)
        return self.counter

    def apply(self, inserts, updates, deletes) -> list[str]:
        """Returns the ids in the changed set, in the order they were touched."""
        changed: list[int] = []
        for mid in deletes:
            n = int(mid[4:])
            self.rows.pop(n, None)
        for mid, text, cat in updates:
            n = int(mid[4:])
            if n not in self.rows:
                got = self._add(text, cat)
                if got is not None:
                    changed.append(got)
            elif text.strip() and not self._taken(text, ignore=n):
                self.rows[n] = (text, cat)
                if n not in changed:
                    changed.append(n)
        for text, cat in inserts:
            got = self._add(text, cat)
            if got is not None:
                changed.append(got)
        return [f"mem_{n:03d}" for n in changed if n in self.rows]


WORDS = ("walk", "Walk", "steps", "knee", "  knee ", "water", "sleep", "WATER")


def random_text(rng: random.Random) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 2)))


def random_delta(rng: random.Random, live: list[str], next_id: int) -> dict:
    """A delta dict that mixes valid, stale and fresh ids with colliding contents."""
    pool = live + [f"mem_{next_id + k:03d}" for k in range(2)] + ["mem_000"]
    cats = ("health", "lifestyle", "fact")
    return {
        "inserts": [{"content": random_text(rng), "category": rng.choice(cats)} for _ in range(rng.randint(0, 3))],
        "updates": [
            {"memory_id": rng.choice(pool), "new_content": random_text(rng), "category": rng.choice(cats)}
            for _ in range(rng.randint(0, 2))
        ],
        "deletes": [{"memory_id": rng.choice(pool)} for _ in range(rng.randint(0, 2))],
    }
