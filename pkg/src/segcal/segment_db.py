"""Bounded best-K storage of informative segments, one table per group.

Each table keeps at most ``capacity`` segment ids ordered by ascending
entropy for its parameter group; a candidate enters a table if the table
has room or if it beats the current worst entry, which is then evicted.
Ties break toward the earlier segment id so replay is deterministic.
Segment payloads are stored once, however many tables reference them, and
are dropped as soon as no table does. Only finite entropies are ever
admitted; singular segments score +inf and are rejected everywhere.

Updates must be externally serialized (single writer); reads between
updates are safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .information import SegmentScore
from .states import Segment


@dataclass
class SegmentRecord:
    segment: Segment
    score: SegmentScore

    @property
    def id(self) -> int:
        return self.segment.id


@dataclass
class DatabasePolicy:
    """Readiness quota per table; capacity is the per-table bound."""

    quota: int = 8


class SegmentDatabase:
    def __init__(self, group_names, capacity: int = 8):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.group_names = list(group_names)
        self.capacity = capacity
        # per group: list of (entropy, segment_id), kept sorted ascending
        self.tables: dict[str, list[tuple[float, int]]] = {g: [] for g in self.group_names}
        self._store: dict[int, SegmentRecord] = {}
        self._seen: set[int] = set()
        self.n_updates = 0

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self._store

    @property
    def n_segments(self) -> int:
        return len(self._store)

    def update(self, record: SegmentRecord) -> list[str]:
        """Offer a scored segment to every table; returns accepting groups."""
        sid = record.id
        if sid in self._seen:
            raise ValueError("segment id %d already offered to the database" % sid)
        self._seen.add(sid)
        self.n_updates += 1
        accepted = []
        for g in self.group_names:
            h = record.score.entropies.get(g, math.inf)
            if not math.isfinite(h):
                continue
            table = self.tables[g]
            key = (h, sid)
            if len(table) < self.capacity:
                table.append(key)
                table.sort()
                accepted.append(g)
            elif self.capacity > 0 and key < table[-1]:
                evicted = table.pop()
                table.append(key)
                table.sort()
                accepted.append(g)
                self._release(evicted[1])
        if accepted:
            self._store[sid] = record
        return accepted

    def _release(self, segment_id: int):
        for table in self.tables.values():
            if any(sid == segment_id for _, sid in table):
                return
        self._store.pop(segment_id, None)

    def is_ready(self, policy: DatabasePolicy | None = None) -> bool:
        """True iff every table holds at least its quota of segments."""
        quota = (policy or DatabasePolicy(self.capacity)).quota
        return all(len(t) >= quota for t in self.tables.values())

    def drain(self) -> list[Segment]:
        """All stored segments, deduplicated, ordered by start time."""
        recs = sorted(self._store.values(), key=lambda r: (r.segment.t_start, r.id))
        return [r.segment for r in recs]

    def records(self) -> list[SegmentRecord]:
        return sorted(self._store.values(), key=lambda r: (r.segment.t_start, r.id))

    def table_max(self, group: str) -> float:
        t = self.tables[group]
        return t[-1][0] if t else math.inf

    def snapshot_dict(self):
        return {
            "capacity": self.capacity,
            "n_updates": self.n_updates,
            "tables": {
                g: [{"segment_id": sid, "entropy": h} for h, sid in t]
                for g, t in self.tables.items()
            },
            "stored_segments": sorted(self._store),
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot_dict(), indent=2)
