"""Run traces: typed records, deterministic ordering, pluggable sinks.

A trace is a sequence of flat JSON objects, one per line, each carrying a
timestamp, a subject vehicle id, a kind tag, and kind-specific fields. The
writer guarantees a total order: lines are sorted by (time, vehicle, kind
ordinal) with ties broken by emission order, and the sort key never
decreases across the whole file. Two runs of the same scenario and seed
produce byte-identical traces; that property is what the hash sink is for.

Records whose timestamps run ahead of simulated time (a transmission that
completes after the current step boundary) are buffered until the
simulation clock passes them, so late emission never breaks the order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set

K_META = "RunMeta"
K_DELIVERED = "MsgDelivered"
K_LOST = "MsgLost"
K_CONFLICT = "ConflictDetected"
K_RESOLVED = "ActionResolved"
K_SENT = "MsgSent"
K_STATE = "StateUpdate"
K_NEAR_MISS = "NearMiss"
K_COLLISION = "Collision"

#: All record kinds in their within-timestamp presentation order. The order
#: mirrors the step pipeline (deliveries land before decisions, decisions
#: before motion); at equal timestamps it is a formatting choice, not a
#: causality claim. The run header sorts ahead of everything.
KINDS = (K_META, K_DELIVERED, K_LOST, K_CONFLICT, K_RESOLVED, K_SENT,
         K_STATE, K_NEAR_MISS, K_COLLISION)

_ORDINAL = {kind: i for i, kind in enumerate(KINDS)}

_ENVELOPE = ("t", "vehicle", "kind")


@dataclass(frozen=True)
class TraceRecord:
    """One trace line: envelope plus kind-specific data fields."""

    t: float
    vehicle: int
    kind: str
    data: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _ORDINAL:
            raise ValueError(f"unknown record kind {self.kind!r}")
        for key in _ENVELOPE:
            if key in self.data:
                raise ValueError(f"data field {key!r} shadows the envelope")

    def sort_key(self):
        return (self.t, self.vehicle, _ORDINAL[self.kind])

    def to_dict(self) -> Dict[str, object]:
        out = {"t": self.t, "vehicle": self.vehicle, "kind": self.kind}
        out.update(self.data)
        return out


def encode_record(record: TraceRecord) -> str:
    # Compact separators and sorted keys make the byte form canonical.
    return json.dumps(record.to_dict(), sort_keys=True,
                      separators=(",", ":"), allow_nan=False)


class JsonlSink:
    """Appends each record as one JSON line to a file."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def emit(self, record: TraceRecord, line: str) -> None:
        self._fh.write(line)
        self._fh.write("\n")

    def close(self) -> None:
        self._fh.close()


class HashSink:
    """SHA-256 over the byte stream a JsonlSink would have written."""

    def __init__(self):
        self._digest = hashlib.sha256()

    def emit(self, record: TraceRecord, line: str) -> None:
        self._digest.update(line.encode("utf-8"))
        self._digest.update(b"\n")

    def hexdigest(self) -> str:
        return self._digest.hexdigest()

    def close(self) -> None:
        pass


class MemorySink:
    """Retains records in memory, optionally only selected kinds."""

    def __init__(self, kinds: Optional[Iterable[str]] = None):
        self.kinds: Optional[Set[str]] = set(kinds) if kinds else None
        self.records: List[TraceRecord] = []

    def emit(self, record: TraceRecord, line: str) -> None:
        if self.kinds is None or record.kind in self.kinds:
            self.records.append(record)

    def close(self) -> None:
        pass


class TraceWriter:
    """Orders, encodes and fans records out to sinks.

    push() accepts records in any order within a step; flush(watermark)
    releases everything stamped at or before the watermark, sorted. The
    caller advances the watermark monotonically (the engine uses the step
    clock), and close() drains whatever ran ahead of the final step.
    """

    def __init__(self, sinks: Sequence = (),
                 kinds: Optional[Iterable[str]] = None):
        self.sinks = list(sinks)
        self.kinds: Optional[Set[str]] = set(kinds) if kinds else None
        self._pending: List[TraceRecord] = []
        self._emitted = 0
        self._last_key = None

    def wants(self, kind: str) -> bool:
        """False when no sink would see the kind; lets hot paths skip work."""
        if not self.sinks:
            return False
        if kind == K_META:
            return True  # the run header rides above kind selection
        return self.kinds is None or kind in self.kinds

    def push(self, record: TraceRecord) -> None:
        if self.wants(record.kind):
            self._pending.append(record)

    def extend(self, records: Iterable[TraceRecord]) -> None:
        for record in records:
            self.push(record)

    def flush(self, watermark: float) -> None:
        if not self._pending:
            return
        due = [r for r in self._pending if r.t <= watermark + 1e-12]
        if not due:
            return
        self._pending = [r for r in self._pending if r.t > watermark + 1e-12]
        due.sort(key=TraceRecord.sort_key)
        for record in due:
            key = record.sort_key()
            if self._last_key is not None and key < self._last_key:
                raise RuntimeError(
                    f"trace order violated: {key} after {self._last_key}")
            self._last_key = key
            line = encode_record(record)
            for sink in self.sinks:
                sink.emit(record, line)
            self._emitted += 1

    def close(self) -> None:
        if self._pending:
            self.flush(max(r.t for r in self._pending))
        for sink in self.sinks:
            sink.close()

    @property
    def emitted(self) -> int:
        return self._emitted


def read_trace(path: str) -> Iterator[Dict[str, object]]:
    """Yield trace lines as dicts; validates the envelope of every line."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in _ENVELOPE:
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing {key!r}")
            if rec["kind"] not in _ORDINAL:
                raise ValueError(
                    f"{path}:{lineno}: unknown kind {rec['kind']!r}")
            yield rec
