"""Brute-force recomputation of a run's claims from its event log alone.

The oracle replays the log from scratch: final source and target states,
per-update settlement times, window TTC at every sample, the queue length
trajectory, lost updates at the flip, and dependency-order violations.  It
shares only the definitional primitives (freshness order, record compare)
with the online path; every aggregate is derived independently and any
disagreement with the run report is flagged.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .domain import (
    DiscrepancyClass,
    Key,
    Schema,
    SourceRecord,
    TargetRecord,
    VersionStamp,
    at_least_as_fresh,
    compare_records,
)
from .metrics import iter_groups
from .scenario import Scenario


@dataclass
class OracleCheck:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class OracleReport:
    checks: list[OracleCheck] = field(default_factory=list)
    final_counts: dict = field(default_factory=dict)
    lost_updates: int | None = None
    ordering_violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(OracleCheck(name, ok, detail))

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [
                {"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks
            ],
            "final_counts": dict(sorted(self.final_counts.items())),
            "lost_updates": self.lost_updates,
            "ordering_violations": self.ordering_violations[:20],
        }

    def to_text(self) -> str:
        lines = [f"oracle: {'PASS' if self.ok else 'FAIL'}"]
        for check in self.checks:
            mark = "ok " if check.ok else "BAD"
            detail = f"  ({check.detail})" if check.detail else ""
            lines.append(f"  [{mark}] {check.name}{detail}")
        if self.final_counts:
            lines.append(f"  final diff counts: {dict(sorted(self.final_counts.items()))}")
        return "\n".join(lines)


def _decode_key(raw) -> Key:
    return Key(raw[0], raw[1])


class LogReplay:
    """Flat, order-preserving decomposition of an event log."""

    def __init__(self, entries: Iterable[dict]):
        self.commits: list[dict] = []
        self.migration_puts: list[dict] = []
        self.samples: list[dict] = []
        self.queue_transitions: list[dict] = []
        self.flip_time: int | None = None
        self.flip_entry: dict | None = None
        self.entries = list(entries)
        for entry in self.entries:
            kind = entry["k"]
            if kind == "commit":
                self.commits.append(entry)
            elif kind == "put":
                if entry.get("out") == "accepted" and entry.get("cls") != "native":
                    self.migration_puts.append(entry)
            elif kind == "sample":
                self.samples.append(entry)
            elif kind in ("enqueue", "dequeue", "dead_letter"):
                self.queue_transitions.append(entry)
            elif kind == "ramp" and entry.get("act") == "flip":
                self.flip_time = entry["t"]
                self.flip_entry = entry

    def source_state(self, before: int | None = None) -> dict[Key, SourceRecord]:
        state: dict[Key, SourceRecord] = {}
        for entry in self.commits:
            if before is not None and entry["t"] >= before:
                continue
            key = _decode_key(entry["key"])
            stamp = VersionStamp(entry["ver"][0], entry["ver"][1])
            if entry["op"] == "delete":
                state[key] = SourceRecord(key, {}, stamp, True)
            else:
                state[key] = SourceRecord(key, entry["val"], stamp, False)
        return state

    def target_state(self, before: int | None = None) -> dict[Key, TargetRecord]:
        state: dict[Key, TargetRecord] = {}
        for entry in self.migration_puts:
            if before is not None and entry["t"] >= before:
                continue
            key = _decode_key(entry["key"])
            prov = {
                Key(et, gid): VersionStamp(c, ct) for et, gid, c, ct in entry["prov"]
            }
            state[key] = TargetRecord(key, entry.get("val", {}), prov, entry["tomb"])
        return state


def settlement_times(
    replay: LogReplay, schema: Schema
) -> dict[tuple[str, str, int], int | None]:
    """Per-update settlement, recomputed by scanning accepted puts.

    An update settles when every affected target key first holds provenance
    for that source key at least as fresh as the update; an update with no
    affected targets settles at its own commit.
    """
    puts_by_target: dict[Key, list[tuple[int, dict]]] = {}
    for entry in replay.migration_puts:
        tkey = _decode_key(entry["key"])
        prov = {(et, gid): VersionStamp(c, ct) for et, gid, c, ct in entry["prov"]}
        puts_by_target.setdefault(tkey, []).append((entry["t"], prov))
    out: dict[tuple[str, str, int], int | None] = {}
    for entry in replay.commits:
        skey = _decode_key(entry["key"])
        stamp = VersionStamp(entry["ver"][0], entry["ver"][1])
        targets = schema.affected_targets(skey)
        if not targets:
            out[(skey.etype, skey.id, stamp.counter)] = stamp.commit_time
            continue
        worst: int | None = stamp.commit_time
        for tkey in targets:
            found = None
            for t, prov in puts_by_target.get(tkey, ()):
                have = prov.get((skey.etype, skey.id))
                if have is not None and at_least_as_fresh(have, stamp):
                    found = t
                    break
            if found is None:
                worst = None
                break
            if worst is not None:
                worst = max(worst, found)
        out[(skey.etype, skey.id, stamp.counter)] = worst
    return out


def window_ttc_bruteforce(
    pairs: list[tuple[int, int | None]], t0: int, t1: int
) -> int | None:
    """Per-tick evaluation of the window TTC definition.

    For every instant s in [t0, t1]: snapshot settlement (latest settlement
    over updates committed at or before s) minus last update time at s.
    """
    relevant = sorted(((c, s) for c, s in pairs if c <= t1), key=lambda p: p[0])
    if not relevant:
        return 0
    if any(s is None for _, s in relevant):
        return None
    commits = [c for c, _ in relevant]
    prefix = []
    best = 0
    for _, s in relevant:
        best = max(best, s)  # type: ignore[arg-type]
        prefix.append(best)
    worst = 0
    for s_at in range(t0, t1 + 1):
        idx = bisect_right(commits, s_at)
        if idx == 0:
            continue
        worst = max(worst, prefix[idx - 1] - commits[idx - 1])
    return worst


def ordering_violations(replay: LogReplay, schema: Schema) -> list[dict]:
    """Live child target writes whose parent target record did not exist yet."""
    violations: list[dict] = []
    source: dict[Key, SourceRecord] = {}
    target_present: set[Key] = set()
    commits = iter(replay.commits)
    puts = iter(replay.migration_puts)
    next_commit = next(commits, None)
    next_put = next(puts, None)
    while next_commit is not None or next_put is not None:
        take_commit = next_put is None or (
            next_commit is not None and next_commit["seq"] <= next_put["seq"]
        )
        if take_commit:
            entry = next_commit
            key = _decode_key(entry["key"])
            stamp = VersionStamp(entry["ver"][0], entry["ver"][1])
            if entry["op"] == "delete":
                source[key] = SourceRecord(key, {}, stamp, True)
            else:
                source[key] = SourceRecord(key, entry["val"], stamp, False)
            next_commit = next(commits, None)
            continue
        entry = next_put
        tkey = _decode_key(entry["key"])
        if not entry["tomb"]:
            rule = schema.rule_for_target(tkey.etype)
            inputs = {
                k: rec
                for k in rule.input_keys(tkey.id)
                if (rec := source.get(k)) is not None
            }
            for pkey in schema.parent_target_keys(inputs):
                if pkey not in target_present:
                    violations.append(
                        {"t": entry["t"], "child": list(tkey), "missing_parent": list(pkey)}
                    )
        target_present.add(tkey)
        next_put = next(puts, None)
    return violations


def final_diff(
    schema: Schema,
    source_state: Mapping[Key, SourceRecord],
    target_state: Mapping[Key, TargetRecord],
) -> tuple[dict[str, int], int]:
    """Classify every expected key; count live target-only extras separately."""
    counts: dict[str, int] = {}
    expected_keys: set[Key] = set()
    for rule, gid in iter_groups(schema, source_state):
        expected, _ = schema.group_expected(rule, gid, source_state.get)
        for tkey, exp in expected.items():
            expected_keys.add(tkey)
            verdict = compare_records(exp, target_state.get(tkey))
            counts[verdict.value] = counts.get(verdict.value, 0) + 1
    extras = sum(
        1
        for tkey, rec in target_state.items()
        if tkey not in expected_keys and not rec.tombstone
    )
    return counts, extras


def queue_lengths_at_samples(replay: LogReplay) -> list[tuple[int, int, int]]:
    """(sample time, sampled length, replayed length) per sample entry."""
    out = []
    length = 0
    by_seq = sorted(
        replay.queue_transitions + replay.samples, key=lambda e: e["seq"]
    )
    for entry in by_seq:
        kind = entry["k"]
        if kind == "enqueue":
            length += 1
        elif kind in ("dequeue", "dead_letter"):
            length -= 1
        else:  # sample
            out.append((entry["t"], entry["qlen"], length))
    return out


def oracle_verify(
    entries: Iterable[dict], scenario: Scenario, report: dict | None = None
) -> OracleReport:
    """Recompute everything checkable from the log; flag report disagreements."""
    schema = scenario.build_schema()
    replay = LogReplay(entries)
    result = OracleReport()

    cutoff = replay.flip_time
    source_state = replay.source_state(before=cutoff)
    target_state = replay.target_state(before=cutoff)
    counts, extras = final_diff(schema, source_state, target_state)
    result.final_counts = dict(counts)
    if extras:
        result.final_counts["live_extras"] = extras
    bad = sum(n for cls, n in counts.items() if cls != DiscrepancyClass.CONSISTENT.value)

    resurrections = counts.get(DiscrepancyClass.RESURRECTION.value, 0)
    result.add(
        "no final resurrections", resurrections == 0, f"resurrections={resurrections}"
    )
    result.add("no live unexpected extras", extras == 0, f"extras={extras}")

    settles = settlement_times(replay, schema)
    commit_pairs: list[tuple[int, int | None]] = []
    for entry in replay.commits:
        skey = _decode_key(entry["key"])
        settle = settles[(skey.etype, skey.id, entry["ver"][0])]
        commit_pairs.append((entry["ver"][1], settle))

    # Sampled window TTC, recomputed per tick.
    if report is not None:
        mismatches = []
        for sample in report.get("samples", []):
            got = window_ttc_bruteforce(
                commit_pairs,
                sample["at"] - scenario.metrics.ttc_window,
                sample["at"],
            )
            if got != sample["window_ttc"]:
                mismatches.append((sample["at"], sample["window_ttc"], got))
        result.add(
            "window TTC matches report",
            not mismatches,
            f"{len(mismatches)} mismatches" + (f", first {mismatches[0]}" if mismatches else ""),
        )

    # Queue length trajectory vs sampled gauge.
    qlen_rows = queue_lengths_at_samples(replay)
    qlen_bad = [(t, sampled, replayed) for t, sampled, replayed in qlen_rows if sampled != replayed]
    result.add(
        "queue length matches log replay",
        not qlen_bad,
        f"{len(qlen_bad)} mismatches" + (f", first {qlen_bad[0]}" if qlen_bad else ""),
    )

    # Dependency ordering over the whole trace.
    violations = ordering_violations(replay, schema)
    result.ordering_violations = violations
    result.add("dependency order respected", not violations, f"{len(violations)} violations")

    if replay.flip_time is not None:
        lost = sum(1 for s in settles.values() if s is None or s > replay.flip_time)
        result.lost_updates = lost
        if report is not None and report.get("switch"):
            claimed = report["switch"]["lost_updates"]
            result.add(
                "lost updates match report", lost == claimed, f"oracle={lost} report={claimed}"
            )
            claimed_disc = report["switch"]["post_switch_discrepancies"]
            result.add(
                "post-switch diff matches report",
                bad == claimed_disc,
                f"oracle={bad} report={claimed_disc}",
            )
    elif report is not None:
        total = sum(counts.values())
        overall = (total - bad) / total if total else 1.0
        claimed_overall = report.get("final_overall", 1.0)
        result.add(
            "final consistency matches report",
            abs(overall - claimed_overall) < 1e-12,
            f"oracle={overall:.9f} report={claimed_overall:.9f}",
        )

    return result
