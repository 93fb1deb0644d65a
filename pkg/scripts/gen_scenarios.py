#!/usr/bin/env python3
"""Regenerate the shipped scenario files in canonical form."""

from __future__ import annotations

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from migsim.healing import RetryPolicy
from migsim.scenario import (
    BootstrapSpec,
    BugSpec,
    BurstSpec,
    ExpectSpec,
    MetricsSpec,
    OfflineSpec,
    RampSpec,
    RuleSpec,
    Scenario,
    TogglesSpec,
    TypeSpec,
    WorkloadSpec,
    serialize,
)
from migsim.stores import FaultProfile

OUT = pathlib.Path(__file__).resolve().parents[1] / "scenarios"

FIGURE3_TYPES = (
    TypeSpec("project"),
    TypeSpec("stage", ("project",)),
    TypeSpec("candidate", ("project", "stage")),
)
FIGURE3_RULES = (
    RuleSpec("project_rule", "identity", ("project",), ("project_v2",)),
    RuleSpec("stage_rule", "identity", ("stage",), ("stage_v2",)),
    RuleSpec("candidate_rule", "identity", ("candidate",), ("candidate_v2",)),
)
FIGURE3_WEIGHTS = (("project", 0.2), ("stage", 0.2), ("candidate", 0.6))


def default() -> Scenario:
    """Bootstrap 100k records, 1,000-tick steady state, drained switch-over."""
    return Scenario(
        name="default",
        seed=101,
        duration=1080,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=100_000,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=5.0,
            read_rate=2.0,
            delete_fraction=0.05,
            delete_types=("candidate",),
            bursts=(BurstSpec(310, 2000, "candidate"), BurstSpec(610, 2000, "candidate")),
            night_rate_factor=0.2,
            day_ticks=720,
        ),
        fault=FaultProfile(availability_p=0.99),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=15_900),
        offline=OfflineSpec(enabled=True, interval=600, cutoff=1440),
        metrics=MetricsSpec(sample_interval=60),
        ramp=RampSpec(
            enabled=True,
            time=1030,
            mode="drained",
            bulk_freeze_lead=300,
            freeze_timeout=60,
        ),
        expect=ExpectSpec(
            outcome="switched",
            max_attempts_ratio=1.02,
            min_attempts_ratio=1.0,
            final_settled_rate=1.0,
            zero_dead_letters=True,
        ),
    )


def small() -> Scenario:
    """Quick desk-size variant of the default, for demos and oracle tests."""
    return Scenario(
        name="small",
        seed=7,
        duration=200,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=500,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=3.0,
            read_rate=1.0,
            delete_fraction=0.05,
            delete_types=("candidate",),
        ),
        fault=FaultProfile(availability_p=0.99),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=15_900),
        offline=OfflineSpec(enabled=True, interval=120, cutoff=30),
        metrics=MetricsSpec(sample_interval=20),
        ramp=RampSpec(
            enabled=True, time=150, mode="drained", bulk_freeze_lead=50, freeze_timeout=30
        ),
        expect=ExpectSpec(outcome="switched", zero_dead_letters=True, final_settled_rate=1.0),
    )


def ramp_pair(mode: str) -> Scenario:
    """Consistency/availability witness: an outage leaves updates in flight
    at ramp time.  Drained mode pays an unavailability window; forced mode
    flips instantly and loses them."""
    return Scenario(
        name=f"ramp_pair_{mode}",
        seed=23,
        duration=1050,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=2000,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=5.0,
            read_rate=1.0,
            delete_fraction=0.05,
            delete_types=("candidate",),
        ),
        fault=FaultProfile(availability_p=0.99, outage_windows=((992, 1000),)),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=15_900),
        offline=OfflineSpec(enabled=False),
        metrics=MetricsSpec(sample_interval=60),
        ramp=RampSpec(
            enabled=True, time=1000, mode=mode, bulk_freeze_lead=100, freeze_timeout=60
        ),
        expect=(
            ExpectSpec(outcome="switched", zero_dead_letters=True)
            if mode == "drained"
            else ExpectSpec(outcome="switched", lost_updates_positive=True)
        ),
    )


def resurrection() -> Scenario:
    """Deletes racing a deliberately slow stale bootstrap, offline sweeps
    after; the final state must show no rebirth of deleted data."""
    return Scenario(
        name="resurrection",
        seed=31,
        duration=500,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=3000,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=8.0,
            read_rate=2.0,
            delete_fraction=0.3,
            update_fraction=0.5,
            delete_types=("candidate",),
        ),
        fault=FaultProfile(availability_p=0.99),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=300),
        offline=OfflineSpec(enabled=True, interval=120, cutoff=30),
        metrics=MetricsSpec(sample_interval=30),
        expect=ExpectSpec(zero_dead_letters=True, final_settled_rate=1.0),
    )


def catchall() -> Scenario:
    """Online paths fully dark: every change event dropped, dual writes off,
    no bootstrap.  Offline verification alone must converge the target."""
    return Scenario(
        name="catchall",
        seed=47,
        duration=520,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=2000,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=3.0,
            read_rate=0.0,
            delete_fraction=0.05,
            delete_types=("candidate",),
            writes_until=400,
        ),
        fault=FaultProfile(availability_p=0.99, stream_drop_p=1.0),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=False),
        offline=OfflineSpec(enabled=True, interval=150, cutoff=30),
        metrics=MetricsSpec(sample_interval=30, staleness_bound_override=240),
        toggles=TogglesSpec(enable_dualwrite=False, enable_shadow=False),
        expect=ExpectSpec(final_settled_rate=1.0, zero_dead_letters=True),
    )


def mapping_bug() -> Scenario:
    """An injected translation bug strands one burst's keys in the queue
    until they dead-letter; after the fix and a requeue everything drains."""
    return Scenario(
        name="mapping_bug",
        seed=59,
        duration=520,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=1000,
            type_weights=(("project", 0.5), ("stage", 0.5), ("candidate", 0.0)),
            write_rate=2.0,
            read_rate=0.0,
            bursts=(BurstSpec(100, 40, "candidate"),),
        ),
        fault=FaultProfile(availability_p=1.0),
        retry=RetryPolicy(max_attempts=10, backoff_base=1, backoff_cap=8, rate_limit=100),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=15_900),
        offline=OfflineSpec(enabled=False),
        metrics=MetricsSpec(sample_interval=20, staleness_bound_override=50),
        bug=BugSpec(
            rule="candidate_rule",
            etype="candidate",
            id_mod=1,
            id_rem=0,
            active_from=90,
            active_until=400,
            requeue_at=420,
        ),
        toggles=TogglesSpec(enable_shadow=False),
        expect=ExpectSpec(final_settled_rate=1.0, zero_dead_letters=True),
    )


def reshape() -> Scenario:
    """Many-to-many translation shapes: one type split into two, two peer
    types merged into one, with a drained switch-over on top."""
    return Scenario(
        name="reshape",
        seed=83,
        duration=300,
        types=(
            TypeSpec("account"),
            TypeSpec("seat", ("account",)),
            TypeSpec("profile", ("account",)),
            TypeSpec("candidate", ("account",)),
        ),
        rules=(
            RuleSpec("account_rule", "identity", ("account",), ("account_v2",)),
            RuleSpec("member_rule", "merge", ("seat", "profile"), ("member_v2",)),
            RuleSpec(
                "candidate_rule",
                "split",
                ("candidate",),
                ("candidate_core_v2", "candidate_notes_v2"),
                split_fields=(
                    ("candidate_core_v2", ("profile", "parent_account")),
                    ("candidate_notes_v2", ("note",)),
                ),
            ),
        ),
        workload=WorkloadSpec(
            initial_records=800,
            type_weights=(
                ("account", 0.2),
                ("seat", 0.2),
                ("profile", 0.2),
                ("candidate", 0.4),
            ),
            write_rate=4.0,
            read_rate=1.0,
            delete_fraction=0.05,
            delete_types=("candidate",),
        ),
        fault=FaultProfile(availability_p=0.99),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="direct", limiter_capacity=15_900),
        offline=OfflineSpec(enabled=True, interval=100, cutoff=20),
        metrics=MetricsSpec(sample_interval=20),
        ramp=RampSpec(
            enabled=True, time=250, mode="drained", bulk_freeze_lead=50, freeze_timeout=30
        ),
        expect=ExpectSpec(outcome="switched", zero_dead_letters=True, final_settled_rate=1.0),
    )


def queue_bootstrap() -> Scenario:
    """Bootstrap routed through the validation queue instead of direct loads."""
    return Scenario(
        name="queue_bootstrap",
        seed=11,
        duration=200,
        types=FIGURE3_TYPES,
        rules=FIGURE3_RULES,
        workload=WorkloadSpec(
            initial_records=600,
            type_weights=FIGURE3_WEIGHTS,
            write_rate=2.0,
            read_rate=1.0,
        ),
        fault=FaultProfile(availability_p=0.99),
        retry=RetryPolicy(),
        bootstrap=BootstrapSpec(enabled=True, mode="queue", limiter_capacity=200),
        offline=OfflineSpec(enabled=True, interval=80, cutoff=20),
        metrics=MetricsSpec(sample_interval=20),
        expect=ExpectSpec(final_settled_rate=1.0, zero_dead_letters=True),
    )


def main() -> None:
    OUT.mkdir(exist_ok=True)
    scenarios = [
        default(),
        small(),
        ramp_pair("drained"),
        ramp_pair("forced"),
        resurrection(),
        catchall(),
        mapping_bug(),
        reshape(),
        queue_bootstrap(),
    ]
    for scenario in scenarios:
        path = OUT / f"{scenario.name}.json"
        path.write_text(serialize(scenario), encoding="utf-8")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
