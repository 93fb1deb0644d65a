"""Convergence metrics: counters, the event log, settlement and TTC math.

Two measurement paths exist on purpose.  The registry and trackers here are
updated online while a run executes; the oracle recomputes the same numbers
from the event log alone after the fact, and any disagreement is a bug.

Definitions used throughout:

* settlement time of an update: earliest tick at which every target key the
  update affects holds provenance for that source key at least as fresh as
  the update itself.
* snapshot settlement at instant s: latest settlement time over all updates
  committed at or before s.
* time to converge (TTC) at s: snapshot settlement at s minus the last
  update time at s; over a window, the maximum across instants.
"""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .domain import (
    DiscrepancyClass,
    Key,
    Schema,
    SourceRecord,
    TargetRecord,
    TransformError,
    VersionStamp,
    at_least_as_fresh,
    compare_records,
)

NOT_SETTLED = None  # sentinel spelled out where a settlement is still open


def encode_key(key: Key | None) -> list[str] | None:
    return [key.etype, key.id] if key is not None else None


class EventLog:
    """Append-only, totally ordered record of everything a run did.

    Entries are plain dicts already shaped like their exported JSON line;
    the digest is over the canonical export, so two runs with equal digests
    did byte-identical things.
    """

    def __init__(self) -> None:
        self.entries: list[dict] = []

    def append(self, t: int, kind: str, key: Key | None = None, **data) -> None:
        entry = {"seq": len(self.entries) + 1, "t": t, "k": kind}
        if key is not None:
            entry["key"] = encode_key(key)
        entry.update(data)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def export_lines(self) -> Iterable[str]:
        for entry in self.entries:
            yield json.dumps(entry, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.export_lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    @staticmethod
    def parse_lines(lines: Iterable[str]) -> "EventLog":
        log = EventLog()
        for line in lines:
            if line.strip():
                log.entries.append(json.loads(line))
        return log


@dataclass
class Histogram:
    count: int = 0
    total: int = 0
    max_value: int = 0

    def add(self, value: int) -> None:
        self.count += 1
        self.total += value
        if value > self.max_value:
            self.max_value = value

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    def as_dict(self) -> dict:
        return {"count": self.count, "mean": round(self.mean, 3), "max": self.max_value}


@dataclass
class MetricsRegistry:
    """Online counters and latency histograms for the repair loop."""

    enqueued: int = 0
    coalesced: int = 0
    dequeued: int = 0
    dead_lettered: int = 0
    requeued: int = 0
    validation_success: int = 0
    validation_failure: int = 0
    fix_success: int = 0
    fix_failure: int = 0
    retries: int = 0
    attempts_total: int = 0
    in_queue_latency: Histogram = field(default_factory=Histogram)
    fix_latency: Histogram = field(default_factory=Histogram)
    pipeline_latency: Histogram = field(default_factory=Histogram)

    @property
    def queue_length(self) -> int:
        return self.enqueued - self.dequeued - self.dead_lettered

    def check_algebra(self) -> None:
        assert self.dequeued <= self.enqueued
        assert self.queue_length >= 0
        assert self.fix_success + self.fix_failure + self.validation_success >= self.dequeued

    def counters_dict(self) -> dict:
        return {
            "enqueued": self.enqueued,
            "coalesced": self.coalesced,
            "dequeued": self.dequeued,
            "dead_lettered": self.dead_lettered,
            "requeued": self.requeued,
            "validation_success": self.validation_success,
            "validation_failure": self.validation_failure,
            "fix_success": self.fix_success,
            "fix_failure": self.fix_failure,
            "retries": self.retries,
            "attempts_total": self.attempts_total,
            "queue_length": self.queue_length,
            "in_queue_latency": self.in_queue_latency.as_dict(),
            "fix_latency": self.fix_latency.as_dict(),
            "pipeline_latency": self.pipeline_latency.as_dict(),
        }


@dataclass
class _UpdateState:
    key: Key
    stamp: VersionStamp
    waiting: set[Key]
    settle_time: int | None = None


class SettlementTracker:
    """Streaming settlement times for every source update.

    Fed with commits and accepted target writes as they happen; answers
    settlement, unsettled counts, and window TTC questions at any point.
    """

    def __init__(self, affected_targets: Callable[[Key], tuple[Key, ...]]):
        self._affected = affected_targets
        self._updates: list[_UpdateState] = []
        self._by_index: dict[tuple[Key, int], int] = {}
        self._open_by_target: dict[Key, set[int]] = {}
        self._unsettled = 0

    def on_commit(self, key: Key, stamp: VersionStamp) -> None:
        targets = self._affected(key)
        state = _UpdateState(key, stamp, set(targets))
        idx = len(self._updates)
        self._updates.append(state)
        self._by_index[(key, stamp.counter)] = idx
        if not state.waiting:
            state.settle_time = stamp.commit_time
            return
        self._unsettled += 1
        for tkey in targets:
            self._open_by_target.setdefault(tkey, set()).add(idx)

    def on_accepted_put(self, record: TargetRecord, now: int) -> None:
        open_here = self._open_by_target.get(record.key)
        if not open_here:
            return
        satisfied = []
        for idx in open_here:
            state = self._updates[idx]
            have = record.provenance.get(state.key)
            if have is not None and at_least_as_fresh(have, state.stamp):
                satisfied.append(idx)
        for idx in satisfied:
            open_here.discard(idx)
            state = self._updates[idx]
            state.waiting.discard(record.key)
            if not state.waiting and state.settle_time is None:
                state.settle_time = now
                self._unsettled -= 1

    def settlement_time(self, key: Key, stamp: VersionStamp) -> int | None:
        """Ticks at which the update settled, or None if it never did."""
        idx = self._by_index.get((key, stamp.counter))
        if idx is None:
            raise KeyError(f"unknown update {key} v{stamp.counter}")
        return self._updates[idx].settle_time

    def unsettled_count(self) -> int:
        return self._unsettled

    def unsettled_updates(self) -> list[tuple[Key, VersionStamp]]:
        return [(s.key, s.stamp) for s in self._updates if s.settle_time is None]

    def updates_as_pairs(self) -> list[tuple[int, int | None]]:
        """(commit_time, settle_time) per update, in commit order."""
        return [(s.stamp.commit_time, s.settle_time) for s in self._updates]

    def window_ttc(self, t0: int, t1: int) -> int | None:
        return time_to_converge(self.updates_as_pairs(), t0, t1)

    def settled_latency_max(self, t0: int, t1: int) -> int:
        """Largest settle-commit gap over settled updates committed in (t0, t1].

        Causal staleness-bound input: unlike window TTC it ignores updates
        that have not settled yet, so stragglers do not inflate the bound
        (their failure to settle is exactly what the bound must expose).
        """
        worst = 0
        for state in self._updates:
            if t0 < state.stamp.commit_time <= t1 and state.settle_time is not None:
                worst = max(worst, state.settle_time - state.stamp.commit_time)
        return worst


def time_to_converge(
    updates: Iterable[tuple[int, int | None]], t0: int, t1: int
) -> int | None:
    """Window TTC over (commit_time, settle_time) pairs; None when unsettled.

    TTC at an instant only changes when an update lands, so the maximum over
    the window equals the maximum over the window start plus every commit
    instant inside it.
    """
    pairs = list(updates)
    if any(a[0] > b[0] for a, b in zip(pairs, pairs[1:])):
        pairs.sort(key=lambda p: p[0])
    relevant = [(c, s) for c, s in pairs if c <= t1]
    if not relevant:
        return 0
    if any(s is None for _, s in relevant):
        return NOT_SETTLED
    commits = [c for c, _ in relevant]
    prefix_settle: list[int] = []
    best = 0
    for _, s in relevant:
        best = max(best, s)  # type: ignore[arg-type]
        prefix_settle.append(best)
    worst = 0
    instants = sorted({t0, *[c for c in commits if t0 <= c <= t1]})
    for s_at in instants:
        idx = bisect_right(commits, s_at)
        if idx == 0:
            continue
        worst = max(worst, prefix_settle[idx - 1] - commits[idx - 1])
    return worst


@dataclass
class ConsistencyReport:
    """One sampled view of convergence health."""

    at: int
    phase: str
    overall_rate: float
    settled_rate: float
    queue_length: int
    max_in_loop_age: int
    staleness_bound: int
    window_ttc: int | None = None
    expected_keys: int = 0
    inconsistent_keys: int = 0

    def as_dict(self) -> dict:
        return {
            "at": self.at,
            "phase": self.phase,
            "overall_rate": self.overall_rate,
            "settled_rate": self.settled_rate,
            "queue_length": self.queue_length,
            "max_in_loop_age": self.max_in_loop_age,
            "staleness_bound": self.staleness_bound,
            "window_ttc": self.window_ttc,
            "expected_keys": self.expected_keys,
            "inconsistent_keys": self.inconsistent_keys,
        }


def consistency_rate(
    schema: Schema,
    source_view: Mapping[Key, SourceRecord],
    target_view: Mapping[Key, TargetRecord],
    at: int,
    staleness_bound: int,
) -> tuple[float, float, dict[DiscrepancyClass, int]]:
    """Full-scan consistency over paired frozen views.

    Returns (overall, settled_only, per-class counts) where overall is the
    fraction of mapped expected target keys whose comparison is consistent
    and settled_only restricts to keys whose every contributing update is
    older than the staleness bound.  Empty expectations rate 1.0.
    """
    counts: dict[DiscrepancyClass, int] = {c: 0 for c in DiscrepancyClass}
    total = 0
    consistent = 0
    settled_total = 0
    settled_consistent = 0
    read = source_view.get
    for rule, gid in iter_groups(schema, source_view):
        try:
            expected, sources = schema.group_expected(rule, gid, read)
        except TransformError:
            # A mapping bug makes the group untranslatable; its keys count
            # as corrupt until the code is fixed.
            sources = {
                k: rec for k in rule.input_keys(gid) if (rec := read(k)) is not None
            }
            newest = max(rec.version.commit_time for rec in sources.values())
            settled = at - newest > staleness_bound
            for _tkey in rule.target_keys(gid):
                counts[DiscrepancyClass.CORRUPT] += 1
                total += 1
                if settled:
                    settled_total += 1
            continue
        if not expected:
            continue
        newest = max(rec.version.commit_time for rec in sources.values())
        settled = at - newest > staleness_bound
        for tkey, exp in expected.items():
            verdict = compare_records(exp, target_view.get(tkey))
            counts[verdict] += 1
            total += 1
            ok = verdict is DiscrepancyClass.CONSISTENT
            consistent += ok
            if settled:
                settled_total += 1
                settled_consistent += ok
    overall = consistent / total if total else 1.0
    settled_only = settled_consistent / settled_total if settled_total else 1.0
    return overall, settled_only, counts


def iter_groups(
    schema: Schema, source_view: Mapping[Key, SourceRecord]
) -> Iterable[tuple]:
    """Distinct (rule, group id) pairs present in a source view, ordered."""
    seen: set[tuple[str, str]] = set()
    out = []
    for key in source_view:
        for rule in schema.rules_for_source(key.etype):
            tag = (rule.name, key.id)
            if tag not in seen:
                seen.add(tag)
                out.append((rule, key.id))
    out.sort(key=lambda pair: (pair[0].name, pair[1]))
    return out


class ConsistencyTracker:
    """Incremental consistency bookkeeping for cheap per-sample reports.

    Caches a verdict per rule group and re-evaluates only groups whose
    sources or targets changed since the last sample.  Produces exactly the
    numbers the full scan would; tests hold it to that.
    """

    def __init__(self, schema: Schema, read_source, peek_target):
        self.schema = schema
        self._read = read_source
        self._peek = peek_target
        self._dirty: set[tuple[str, str]] = set()
        self._group_rule: dict[tuple[str, str], object] = {}
        self._expected_count: dict[tuple[str, str], int] = {}
        self._bad_count: dict[tuple[str, str], int] = {}
        self._last_update: dict[tuple[str, str], int] = {}
        self._recent: dict[tuple[str, str], int] = {}
        self._total_expected = 0
        self._total_bad = 0

    def mark_source(self, skey: Key, commit_time: int) -> None:
        for rule in self.schema.rules_for_source(skey.etype):
            tag = (rule.name, skey.id)
            self._group_rule[tag] = rule
            self._dirty.add(tag)
            self._last_update[tag] = commit_time
            self._recent[tag] = commit_time

    def mark_target(self, tkey: Key) -> None:
        try:
            rule = self.schema.rule_for_target(tkey.etype)
        except Exception:
            return
        tag = (rule.name, tkey.id)
        self._group_rule[tag] = rule
        self._dirty.add(tag)

    def _refresh(self) -> None:
        for tag in sorted(self._dirty):
            rule = self._group_rule[tag]
            try:
                expected, _sources = self.schema.group_expected(rule, tag[1], self._read)
                n_expected = len(expected)
                bad = 0
                for tkey, exp in expected.items():
                    if compare_records(exp, self._peek(tkey)) is not DiscrepancyClass.CONSISTENT:
                        bad += 1
            except TransformError:
                n_expected = len(rule.target_types)
                bad = n_expected
            self._total_expected += n_expected - self._expected_count.get(tag, 0)
            self._total_bad += bad - self._bad_count.get(tag, 0)
            self._expected_count[tag] = n_expected
            self._bad_count[tag] = bad
        self._dirty.clear()

    def rates(self, at: int, staleness_bound: int) -> tuple[float, float, int, int]:
        """(overall, settled_only, expected_total, inconsistent_total) at `at`."""
        self._refresh()
        cutoff = at - staleness_bound
        for tag in [t for t, lu in self._recent.items() if lu <= cutoff]:
            del self._recent[tag]
        recent_expected = sum(
            self._expected_count.get(tag, 0)
            for tag, lu in self._recent.items()
            if lu > cutoff
        )
        recent_bad = sum(
            self._bad_count.get(tag, 0) for tag, lu in self._recent.items() if lu > cutoff
        )
        overall = (
            (self._total_expected - self._total_bad) / self._total_expected
            if self._total_expected
            else 1.0
        )
        settled_total = self._total_expected - recent_expected
        settled_bad = self._total_bad - recent_bad
        settled = (settled_total - settled_bad) / settled_total if settled_total else 1.0
        return overall, settled, self._total_expected, self._total_bad


def loop_gauges(queue, now: int) -> tuple[int, int]:
    """(queue length, age of the oldest data point still in the loop)."""
    length = len(queue)
    if length == 0:
        return 0, 0
    oldest = min(event.source_update_time for event in queue.pending())
    return length, now - oldest
