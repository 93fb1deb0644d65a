from __future__ import annotations

import dataclasses

from migsim.metrics import time_to_converge
from migsim.oracle import (
    LogReplay,
    final_diff,
    oracle_verify,
    ordering_violations,
    queue_lengths_at_samples,
    settlement_times,
    window_ttc_bruteforce,
)
from migsim.scenario import load_file
from migsim.simulation import run_scenario

from conftest import build_figure3_schema, scenario_path


def commit_entry(t, etype, gid, counter, op="write", val=None):
    entry = {"t": t, "k": "commit", "key": [etype, gid], "cseq": 0,
             "ver": [counter, t], "op": op}
    if op == "write":
        entry["val"] = val or {"n": "x"}
    return entry


def put_entry(t, etype, gid, prov, tomb=False, val=None, cls="dual", out="accepted"):
    entry = {"t": t, "k": "put", "key": [etype, gid], "cls": cls, "out": out}
    if out == "accepted":
        entry.update(tomb=tomb, prov=prov, val=({} if tomb else (val or {"n": "x"})))
    return entry


class TestHandBuiltCases:
    def test_ttc_overlap_case_is_five(self):
        # Updates (commit 10 -> settle 12) and (commit 11 -> settle 16).
        assert window_ttc_bruteforce([(10, 12), (11, 16)], 0, 20) == 5
        assert time_to_converge([(10, 12), (11, 16)], 0, 20) == 5

    def test_single_update_case(self):
        assert window_ttc_bruteforce([(10, 12)], 10, 20) == 2

    def test_empty_case(self):
        assert window_ttc_bruteforce([], 0, 20) == 0

    def test_settlement_from_hand_built_log(self):
        schema = build_figure3_schema()
        entries = [
            commit_entry(10, "project", "1", 1),
            put_entry(12, "project_v2", "1", [["project", "1", 1, 10]]),
            commit_entry(11, "project", "2", 1),
            put_entry(16, "project_v2", "2", [["project", "2", 1, 11]]),
            commit_entry(20, "project", "3", 1),  # never replicated
        ]
        replay = LogReplay(entries)
        settles = settlement_times(replay, schema)
        assert settles[("project", "1", 1)] == 12
        assert settles[("project", "2", 1)] == 16
        assert settles[("project", "3", 1)] is None

    def test_superseding_write_settles_earlier_update(self):
        schema = build_figure3_schema()
        entries = [
            commit_entry(10, "project", "1", 1),
            commit_entry(15, "project", "1", 2),
            put_entry(20, "project_v2", "1", [["project", "1", 2, 15]]),
        ]
        settles = settlement_times(LogReplay(entries), schema)
        assert settles[("project", "1", 1)] == 20
        assert settles[("project", "1", 2)] == 20

    def test_ordering_violation_detected(self):
        schema = build_figure3_schema()
        entries = [
            commit_entry(0, "project", "1", 1),
            commit_entry(
                1, "stage", "1", 1, val={"n": "s", "parent_project": "1"}
            ),
            # child written while project_v2#1 is still absent
            put_entry(2, "stage_v2", "1", [["stage", "1", 1, 1]],
                      val={"n": "s", "parent_project": "1"}),
        ]
        for i, e in enumerate(entries):
            e["seq"] = i + 1
        violations = ordering_violations(LogReplay(entries), schema)
        assert len(violations) == 1
        assert violations[0]["missing_parent"] == ["project_v2", "1"]

    def test_tombstone_write_is_not_an_ordering_violation(self):
        schema = build_figure3_schema()
        entries = [
            commit_entry(0, "stage", "1", 1, op="delete"),
            put_entry(1, "stage_v2", "1", [["stage", "1", 1, 0]], tomb=True),
        ]
        for i, e in enumerate(entries):
            e["seq"] = i + 1
        assert ordering_violations(LogReplay(entries), schema) == []

    def test_final_diff_sees_resurrection(self):
        schema = build_figure3_schema()
        entries = [
            commit_entry(0, "project", "1", 1),
            put_entry(1, "project_v2", "1", [["project", "1", 1, 0]]),
            commit_entry(2, "project", "1", 2, op="delete"),
            # delete never replicated; target stays live
        ]
        replay = LogReplay(entries)
        counts, extras = final_diff(schema, replay.source_state(), replay.target_state())
        assert counts["resurrection"] == 1
        assert extras == 0

    def test_queue_replay_detects_mismatched_sample(self):
        entries = [
            {"seq": 1, "t": 0, "k": "enqueue", "key": ["project_v2", "1"], "trig": "nearline", "sut": 0},
            {"seq": 2, "t": 1, "k": "sample", "qlen": 0},  # wrong: should be 1
        ]
        rows = queue_lengths_at_samples(LogReplay(entries))
        assert rows == [(1, 0, 1)]


class TestAgainstRuns:
    def test_forced_flip_lost_updates_recounted(self):
        result = run_scenario(load_file(scenario_path("ramp_pair_forced")))
        assert result.oracle_report.lost_updates == result.report.switch["lost_updates"]
        assert result.oracle_report.lost_updates > 0

    def test_settlements_match_online_tracker_exactly(self):
        result = run_scenario(load_file(scenario_path("small")))
        assert len(result.log.entries) <= 10_000
        schema = result.schema
        replay = LogReplay(result.log.entries)
        oracle_settles = settlement_times(replay, schema)
        for entry in replay.commits:
            key_tuple = (entry["key"][0], entry["key"][1], entry["ver"][0])
            from migsim.domain import Key, VersionStamp

            online = result.settlement.settlement_time(
                Key(entry["key"][0], entry["key"][1]),
                VersionStamp(entry["ver"][0], entry["ver"][1]),
            )
            assert oracle_settles[key_tuple] == online

    def test_tampered_report_is_flagged(self):
        scenario = load_file(scenario_path("small"))
        result = run_scenario(scenario)
        doc = result.report.as_dict()
        doc["samples"][-1]["window_ttc"] = 999
        tampered = oracle_verify(result.log.entries, scenario, doc)
        failed = {c.name for c in tampered.checks if not c.ok}
        assert "window TTC matches report" in failed
