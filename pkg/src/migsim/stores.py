"""In-process legacy store with change stream, and target store with faults.

The legacy store is the reference: always available, append-only change
log, full per-key history so snapshots can be cut at any past tick.  The
target store injects unavailability from a seeded fault profile and guards
every write with a freshness check, which is what lets repair and dual
writes race without transactions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from .domain import (
    Key,
    SourceRecord,
    TargetRecord,
    VersionStamp,
    provenance_regresses,
)
from .metrics import EventLog

EMPTY_TIME = -1  # last_update_time of an empty snapshot


class StoreUnavailable(Exception):
    """Transient store failure; the operation left no trace and may be retried."""


class PutResult(str, Enum):
    ACCEPTED = "accepted"
    STALE_REJECTED = "stale_rejected"


@dataclass
class Clock:
    """Shared virtual clock, in ticks (1 tick = 1 simulated minute)."""

    now: int = 0


class ChangeEvent(NamedTuple):
    seq: int
    key: Key
    new_version: VersionStamp
    op: str  # "write" | "delete"


@dataclass(frozen=True)
class FaultProfile:
    """Time-scheduled unavailability and change-stream degradation."""

    availability_p: float = 1.0
    outage_windows: tuple[tuple[int, int], ...] = ()
    stream_lag: int = 0
    stream_drop_p: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.availability_p <= 1.0:
            raise ValueError("availability_p must be in (0, 1]")
        spans = sorted(self.outage_windows)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError("outage windows must not overlap")
        if self.stream_lag < 0 or not 0.0 <= self.stream_drop_p <= 1.0:
            raise ValueError("invalid stream fault parameters")

    def in_outage(self, now: int) -> bool:
        return any(start <= now < end for start, end in self.outage_windows)


class Snapshot:
    """Immutable copy of the legacy store as of a past tick."""

    def __init__(self, taken_at: int, records: Mapping[Key, SourceRecord]):
        self.taken_at = taken_at
        self.records: dict[Key, SourceRecord] = dict(records)
        self.last_update_time = max(
            (r.version.commit_time for r in self.records.values()), default=EMPTY_TIME
        )

    def __len__(self) -> int:
        return len(self.records)

    def export_lines(self) -> list[str]:
        """One canonical line per record; header first."""
        lines = [
            json.dumps(
                {"taken_at": self.taken_at, "last_update_time": self.last_update_time},
                sort_keys=True,
            )
        ]
        for key in sorted(self.records):
            rec = self.records[key]
            lines.append(
                json.dumps(
                    {
                        "type": key.etype,
                        "id": key.id,
                        "counter": rec.version.counter,
                        "commit_time": rec.version.commit_time,
                        "tombstone": rec.tombstone,
                        "value": dict(sorted(rec.value.items())),
                    },
                    sort_keys=True,
                )
            )
        return lines

    @classmethod
    def parse_lines(cls, lines: Iterable[str]) -> "Snapshot":
        it = iter(lines)
        header = json.loads(next(it))
        records: dict[Key, SourceRecord] = {}
        for line in it:
            if not line.strip():
                continue
            row = json.loads(line)
            key = Key(row["type"], row["id"])
            records[key] = SourceRecord(
                key,
                row["value"],
                VersionStamp(row["counter"], row["commit_time"]),
                row["tombstone"],
            )
        snap = cls(header["taken_at"], records)
        if snap.last_update_time != header["last_update_time"]:
            raise ValueError("snapshot header does not match records")
        return snap

    def contents_hash(self) -> str:
        digest = hashlib.sha256()
        for line in self.export_lines():
            digest.update(line.encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()


class LegacyStore:
    """Source of truth.  Always available; every commit is logged and kept."""

    def __init__(self, clock: Clock):
        self.clock = clock
        self.records: dict[Key, SourceRecord] = {}
        self.change_log: list[ChangeEvent] = []
        self._history: dict[Key, list[SourceRecord]] = {}
        self.commit_hooks: list[Callable[[ChangeEvent], None]] = []

    def commit(self, key: Key, value: Mapping[str, str] | None) -> ChangeEvent:
        """Store a new version (value=None deletes) and append a change event.

        Downstream hooks run only after the commit is fully recorded, so the
        legacy write path never observes replication outcomes.
        """
        prev = self.records.get(key)
        counter = (prev.version.counter if prev else 0) + 1
        stamp = VersionStamp(counter, self.clock.now)
        if value is None:
            rec = SourceRecord(key, {}, stamp, True)
            op = "delete"
        else:
            rec = SourceRecord(key, dict(value), stamp, False)
            op = "write"
        self.records[key] = rec
        self._history.setdefault(key, []).append(rec)
        event = ChangeEvent(len(self.change_log) + 1, key, stamp, op)
        self.change_log.append(event)
        for hook in self.commit_hooks:
            hook(event)
        return event

    def read(self, key: Key) -> SourceRecord | None:
        return self.records.get(key)

    def max_seq(self) -> int:
        return len(self.change_log)

    def take_snapshot(self, now: int) -> Snapshot:
        """Frozen copy of everything committed at or before `now`."""
        records: dict[Key, SourceRecord] = {}
        for key, versions in self._history.items():
            chosen = None
            for rec in versions:
                if rec.version.commit_time <= now:
                    chosen = rec
                else:
                    break
            if chosen is not None:
                records[key] = chosen
        return Snapshot(now, records)


class WriteAttempt(NamedTuple):
    seq: int
    time: int
    record: TargetRecord
    outcome: str  # PutResult value or "unavailable"


class TargetStore:
    """Destination store with freshness-guarded conditional writes.

    Availability is decided per operation from a seeded stream, so the k-th
    store operation of a run always sees the same draw for the same seed.
    Tombstones are never compacted away within a run.
    """

    def __init__(self, clock: Clock, fault: FaultProfile, rng: np.random.Generator):
        self.clock = clock
        self.fault = fault
        self._rng = rng
        self.records: dict[Key, TargetRecord] = {}
        self.write_log: list[WriteAttempt] = []
        self.op_count = 0
        self.on_accept: list[Callable[[TargetRecord, int], None]] = []
        self.event_log: EventLog | None = None
        self.writer_class = "live"  # which pipeline is writing; set per phase

    def _check_available(self) -> bool:
        self.op_count += 1
        draw = self._rng.random()
        if self.fault.in_outage(self.clock.now):
            return False
        return draw < self.fault.availability_p

    def _log_put(self, record: TargetRecord, outcome: str) -> None:
        self.write_log.append(
            WriteAttempt(len(self.write_log) + 1, self.clock.now, record, outcome)
        )
        if self.event_log is None:
            return
        if outcome == PutResult.ACCEPTED.value:
            self.event_log.append(
                self.clock.now,
                "put",
                record.key,
                cls=self.writer_class,
                out=outcome,
                tomb=record.tombstone,
                prov=sorted(
                    [k.etype, k.id, v.counter, v.commit_time]
                    for k, v in record.provenance.items()
                ),
                val=dict(record.value),
            )
        else:
            self.event_log.append(
                self.clock.now, "put", record.key, cls=self.writer_class, out=outcome
            )

    def put_if_fresher(self, record: TargetRecord) -> PutResult:
        """Accept unless the write would regress any stored provenance entry.

        Raises StoreUnavailable on a fault; the stored value is untouched and
        the attempt is still audited.
        """
        if not self._check_available():
            self._log_put(record, "unavailable")
            raise StoreUnavailable(f"put {record.key}")
        stored = self.records.get(record.key)
        if stored is not None and provenance_regresses(record.provenance, stored.provenance):
            self._log_put(record, PutResult.STALE_REJECTED.value)
            return PutResult.STALE_REJECTED
        self.records[record.key] = record
        self._log_put(record, PutResult.ACCEPTED.value)
        for hook in self.on_accept:
            hook(record, self.clock.now)
        return PutResult.ACCEPTED

    def put_native(self, record: TargetRecord) -> None:
        """Unconditional write used once this store is the source of truth."""
        if not self._check_available():
            raise StoreUnavailable(f"native put {record.key}")
        self.records[record.key] = record
        if self.event_log is not None:
            self.event_log.append(
                self.clock.now, "put", record.key, cls="native", out="accepted"
            )

    def get(self, key: Key) -> TargetRecord | None:
        if not self._check_available():
            raise StoreUnavailable(f"get {key}")
        return self.records.get(key)

    def peek(self, key: Key) -> TargetRecord | None:
        """Monitoring read: no availability draw, never fails."""
        return self.records.get(key)

    def frozen_view(self) -> dict[Key, TargetRecord]:
        """Point-in-time copy for offline verification and reporting."""
        return dict(self.records)

    @staticmethod
    def replay(write_log: Iterable[WriteAttempt]) -> dict[Key, TargetRecord]:
        """Rebuild final contents from the audit log (accepted writes only)."""
        state: dict[Key, TargetRecord] = {}
        for attempt in write_log:
            if attempt.outcome == PutResult.ACCEPTED.value:
                state[attempt.record.key] = attempt.record
        return state


@dataclass
class _Delivery:
    deliver_at: int
    event: ChangeEvent


class ChangeStream:
    """Ordered change-event delivery with fixed lag and seeded drops.

    Delivery is at-most-once: a dropped event is gone for every subscriber
    (offline verification is the catch-all for those).
    """

    def __init__(
        self,
        fault: FaultProfile,
        rng: np.random.Generator,
        source: "LegacyStore | None" = None,
    ):
        self.fault = fault
        self._rng = rng
        self._source = source
        self._pending: list[_Delivery] = []
        self._subscribers: list[tuple[Callable[[ChangeEvent, int], None], int]] = []
        self.dropped: int = 0
        self._max_seq_seen = 0

    def subscribe(self, consumer: Callable[[ChangeEvent, int], None], from_seq: int) -> None:
        horizon = self._source.max_seq() if self._source is not None else self._max_seq_seen
        if from_seq > horizon + 1:
            raise ValueError(f"from_seq {from_seq} beyond next sequence")
        self._subscribers.append((consumer, from_seq))

    def feed(self, event: ChangeEvent, now: int) -> None:
        self._max_seq_seen = max(self._max_seq_seen, event.seq)
        if self.fault.stream_drop_p > 0 and self._rng.random() < self.fault.stream_drop_p:
            self.dropped += 1
            return
        self._pending.append(_Delivery(now + self.fault.stream_lag, event))

    def deliver_due(self, now: int) -> int:
        """Dispatch every delivery due by `now`, in sequence order."""
        due = [d for d in self._pending if d.deliver_at <= now]
        if not due:
            return 0
        self._pending = [d for d in self._pending if d.deliver_at > now]
        due.sort(key=lambda d: d.event.seq)
        for delivery in due:
            for consumer, from_seq in self._subscribers:
                if delivery.event.seq >= from_seq:
                    consumer(delivery.event, now)
        return len(due)

    def pending_count(self) -> int:
        return len(self._pending)
