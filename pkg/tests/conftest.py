from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

from migsim.domain import (
    EntityType,
    Key,
    Schema,
    identity_rule,
    register_schema,
    split_rule,
)
from migsim.dualwrite import DualWriter
from migsim.healing import Healer, RetryPolicy, SelfHealingQueue
from migsim.metrics import EventLog, MetricsRegistry
from migsim.rng import named_stream
from migsim.stores import Clock, FaultProfile, LegacyStore, TargetStore

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"


def scenario_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.json"


def build_figure3_schema() -> Schema:
    types = [
        EntityType("project"),
        EntityType("stage", frozenset({"project"})),
        EntityType("candidate", frozenset({"project", "stage"})),
    ]
    rules = [
        identity_rule("project_rule", "project", "project_v2"),
        identity_rule("stage_rule", "stage", "stage_v2"),
        identity_rule("candidate_rule", "candidate", "candidate_v2"),
    ]
    return register_schema(types, rules)


def build_split_schema() -> Schema:
    types = [
        EntityType("project"),
        EntityType("candidate", frozenset({"project"})),
    ]
    rules = [
        identity_rule("project_rule", "project", "project_v2"),
        split_rule(
            "candidate_rule",
            "candidate",
            [
                ("candidate_core_v2", ("profile", "parent_project")),
                ("candidate_notes_v2", ("note",)),
            ],
        ),
    ]
    return register_schema(types, rules)


@pytest.fixture
def figure3_schema() -> Schema:
    return build_figure3_schema()


@pytest.fixture
def split_schema() -> Schema:
    return build_split_schema()


@dataclass
class Pipeline:
    """Hand-drivable store pair with queue, healer, and dual writer."""

    clock: Clock
    schema: Schema
    legacy: LegacyStore
    target: TargetStore
    queue: SelfHealingQueue
    healer: Healer
    dualwriter: DualWriter
    registry: MetricsRegistry
    log: EventLog

    def commit(self, etype: str, gid: str, value=None, delete: bool = False):
        key = Key(etype, gid)
        event = self.legacy.commit(key, None if delete else (value or {"f": "v"}))
        return event

    def commit_and_replicate(self, etype: str, gid: str, value=None, delete: bool = False):
        event = self.commit(etype, gid, value, delete)
        task = self.dualwriter.on_commit(event)
        return self.dualwriter.replicate(task)


def build_pipeline(
    schema: Schema | None = None,
    availability: float = 1.0,
    outages: tuple = (),
    policy: RetryPolicy | None = None,
    seed: int = 1,
) -> Pipeline:
    clock = Clock(0)
    schema = schema or build_figure3_schema()
    fault = FaultProfile(availability_p=availability, outage_windows=outages)
    legacy = LegacyStore(clock)
    target = TargetStore(clock, fault, named_stream(seed, "target_ops"))
    registry = MetricsRegistry()
    log = EventLog()
    target.event_log = log
    queue = SelfHealingQueue(registry, log)
    healer = Healer(
        schema, legacy, target, queue, registry, log, clock, policy or RetryPolicy()
    )
    dualwriter = DualWriter(schema, legacy, target, queue, clock)
    return Pipeline(clock, schema, legacy, target, queue, healer, dualwriter, registry, log)


@pytest.fixture
def pipeline() -> Pipeline:
    return build_pipeline()
