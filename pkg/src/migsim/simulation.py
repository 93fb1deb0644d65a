"""Deterministic scenario runner on a virtual clock.

Tick phases, in order: ramp controller, workload (legacy commits or, after
the flip, native target traffic), dual-write replication, change-stream
delivery, nearline checks, shadow reads, offline verification, self-healing
queue processing, bootstrap backfill, metrics sampling.  Live traffic always
runs before repair and backfill, which only get the tick's spare capacity.

Equal scenarios produce byte-identical event logs; every random draw comes
from a named substream of the scenario seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .domain import (
    DiscrepancyClass,
    Key,
    Schema,
    SourceRecord,
    TargetRecord,
    TransformError,
    VersionStamp,
)
from .dualwrite import DualWriter
from .healing import Healer, SelfHealingQueue
from .metrics import (
    ConsistencyReport,
    ConsistencyTracker,
    EventLog,
    MetricsRegistry,
    SettlementTracker,
    consistency_rate,
    loop_gauges,
    time_to_converge,
)
from .oracle import OracleReport, oracle_verify
from .ramp import RampController
from .rng import named_stream
from .scenario import BugSpec, Scenario, serialize
from .stores import ChangeStream, Clock, LegacyStore, StoreUnavailable, TargetStore
from .verifiers import BootstrapJob, NearlineVerifier, OfflineVerifier, RateLimiter, ShadowReader
from .workload import OP_DELETE, OP_READ, OP_WRITE, WorkloadGenerator


@dataclass
class RunReport:
    """Serializable summary of one run; the oracle cross-checks its claims."""

    name: str
    seed: int
    duration: int
    initial_records: int
    samples: list[ConsistencyReport] = field(default_factory=list)
    bootstrap: dict | None = None
    switch: dict | None = None
    counters: dict = field(default_factory=dict)
    attempts_total: int = 0
    attempts_ratio: float | None = None
    dead_letters: list = field(default_factory=list)
    final_overall: float = 1.0
    final_settled: float = 1.0
    final_counts: dict = field(default_factory=dict)
    rejected_writes: int = 0
    log_digest: str = ""
    oracle: dict | None = None
    expect_failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        oracle_ok = self.oracle is None or self.oracle.get("ok", False)
        return oracle_ok and not self.expect_failures

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "duration": self.duration,
            "initial_records": self.initial_records,
            "samples": [s.as_dict() for s in self.samples],
            "bootstrap": self.bootstrap,
            "switch": self.switch,
            "counters": self.counters,
            "attempts_total": self.attempts_total,
            "attempts_ratio": self.attempts_ratio,
            "dead_letters": self.dead_letters,
            "final_overall": self.final_overall,
            "final_settled": self.final_settled,
            "final_counts": self.final_counts,
            "rejected_writes": self.rejected_writes,
            "log_digest": self.log_digest,
            "oracle": self.oracle,
            "expect_failures": self.expect_failures,
            "ok": self.ok,
        }

    def headline(self) -> str:
        last = self.samples[-1] if self.samples else None
        lines = ["convergence headline:"]
        if last is not None:
            lines.append(f"  overall consistency:  {last.overall_rate:.6f}")
            lines.append(f"  settled consistency:  {last.settled_rate:.6f}")
            lines.append(f"  in the loop (queue):  {last.queue_length}")
            lines.append(f"  max in-loop data age: {last.max_in_loop_age}")
        lines.append(f"  validate+fix attempts: {self.attempts_total}")
        if self.attempts_ratio is not None:
            lines.append(f"  attempts / N:          {self.attempts_ratio:.4f}")
        if self.switch:
            lines.append(
                f"  switch: {self.switch['outcome']}"
                f" window={self.switch['unavailability_window']}"
                f" lost={self.switch['lost_updates']}"
                f" residual={self.switch['post_switch_discrepancies']}"
            )
        return "\n".join(lines)


@dataclass
class SimResult:
    """Run artifacts kept in memory for tests and the CLI."""

    report: RunReport
    log: EventLog
    schema: Schema
    legacy: LegacyStore
    target: TargetStore
    queue: SelfHealingQueue
    registry: MetricsRegistry
    settlement: SettlementTracker
    limiter: RateLimiter
    live_ops: list[tuple[int, str, str]]
    oracle_report: OracleReport | None = None


def _wrap_with_bug(transform, bug: BugSpec, clock: Clock):
    def buggy(sources):
        if bug.active_from <= clock.now < bug.active_until:
            for skey, rec in sources.items():
                if (
                    skey.etype == bug.etype
                    and not rec.tombstone
                    and int(skey.id) % bug.id_mod == bug.id_rem
                ):
                    raise TransformError(f"injected mapping bug on {skey}")
        return transform(sources)

    return buggy


def _build_schema(scenario: Scenario, clock: Clock) -> Schema:
    from .domain import EntityType, MappingRule, register_schema

    types = [EntityType(t.name, frozenset(t.parents)) for t in scenario.types]
    rules = []
    for spec in scenario.rules:
        rule = spec.build()
        if scenario.bug is not None and scenario.bug.rule == spec.name:
            rule = MappingRule(
                rule.name,
                rule.source_types,
                rule.target_types,
                _wrap_with_bug(rule.transform, scenario.bug, clock),
            )
        rules.append(rule)
    return register_schema(types, rules)


class _RampStatus:
    """Telemetry bundle the ramp controller polls each tick."""

    def __init__(self, sim: "_SimState"):
        self.sim = sim

    def fresh_report(self) -> ConsistencyReport:
        return self.sim.sample_report(self.sim.clock.now, record=False)

    def dead_letter_count(self) -> int:
        return len(self.sim.queue.dead_letters())

    def drained(self) -> bool:
        sim = self.sim
        return (
            len(sim.queue) == 0
            and sim.dualwriter.pending_count() == 0
            and sim.stream.pending_count() == 0
            and sim.nearline.pending_count() == 0
        )

    def unsettled_count(self) -> int:
        return self.sim.settlement.unsettled_count()

    def on_flip(self, now: int) -> tuple[int, int]:
        return self.sim.flip_measurements(now)


class _SimState:
    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.seed = seed
        self.clock = Clock(0)
        self.log = EventLog()
        self.registry = MetricsRegistry()
        self.schema = _build_schema(scenario, self.clock)
        self.legacy = LegacyStore(self.clock)
        self.target = TargetStore(
            self.clock, scenario.fault, named_stream(seed, "target_ops")
        )
        self.target.event_log = self.log
        self.queue = SelfHealingQueue(self.registry, self.log)
        self.healer = Healer(
            self.schema, self.legacy, self.target, self.queue,
            self.registry, self.log, self.clock, scenario.retry,
        )
        self.dualwriter = DualWriter(
            self.schema, self.legacy, self.target, self.queue, self.clock,
            enabled=scenario.toggles.enable_dualwrite,
        )
        self.stream = ChangeStream(
            scenario.fault, named_stream(seed, "stream"), source=self.legacy
        )
        self.nearline = NearlineVerifier(
            self.schema, self.legacy, self.target, self.queue,
            self.log, self.clock, scenario.settle_delay(),
        )
        self.shadow = ShadowReader(
            self.schema, self.legacy, self.target, self.queue, self.log,
            self.clock, scenario.toggles.shadow_alarm_interval,
        )
        self.offline = OfflineVerifier(self.schema, self.queue, self.log)
        self.settlement = SettlementTracker(self.schema.affected_targets)
        self.ctracker = ConsistencyTracker(self.schema, self.legacy.read, self.target.peek)
        self.limiter = RateLimiter(scenario.bootstrap.limiter_capacity)
        self.workload = WorkloadGenerator(
            scenario.workload, self.schema, named_stream(seed, "workload")
        )
        self.ramp: RampController | None = None
        if scenario.ramp.enabled:
            self.ramp = RampController(
                scenario.ramp.plan(), scenario.ramp.criteria(), self.log
            )
        self.bootstrap_job: BootstrapJob | None = None
        self.live_ops: list[tuple[int, str, str]] = []
        self.samples: list[ConsistencyReport] = []
        self.flip_rates: tuple[float, float] | None = None
        self.rejected_writes = 0

        def _on_accept(record: TargetRecord, now: int) -> None:
            self.settlement.on_accepted_put(record, now)
            self.ctracker.mark_target(record.key)

        self.target.on_accept.append(_on_accept)

    # -- phases --------------------------------------------------------

    def seed_phase(self) -> None:
        for op in self.workload.seed_initial(self.legacy.read):
            self._commit(op.key, op.value, attach=False)

    def _commit(self, key: Key, value, attach: bool) -> None:
        event = self.legacy.commit(key, value)
        entry = {
            "cseq": event.seq,
            "ver": [event.new_version.counter, event.new_version.commit_time],
            "op": event.op,
        }
        if event.op == "write":
            entry["val"] = self.legacy.records[key].value
        self.log.append(self.clock.now, "commit", key, **entry)
        self.settlement.on_commit(key, event.new_version)
        self.ctracker.mark_source(key, event.new_version.commit_time)
        if attach:
            self.dualwriter.on_commit(event)
            self.stream.feed(event, self.clock.now)

    def workload_phase(self, now: int) -> list:
        scenario = self.scenario
        flipped = self.ramp is not None and self.ramp.flipped
        frozen_writes = self.ramp is not None and self.ramp.writes_frozen
        bulk_frozen = self.ramp is not None and self.ramp.bulk_frozen
        read_current = self._post_flip_read if flipped else self.legacy.read
        ops = self.workload.generate_step(now, read_current, bulk_frozen=bulk_frozen)
        reads: list = []
        for op in ops:
            self.live_ops.append((now, op.kind, str(op.key)))
            if op.kind == OP_READ:
                if flipped:
                    self._native_read(op.key)
                else:
                    rec = self.legacy.read(op.key)
                    if rec is not None:
                        reads.append((op.key, rec))
                continue
            if flipped:
                self._native_write(op)
                continue
            if frozen_writes:
                self.rejected_writes += 1
                if self.ramp is not None:
                    self.ramp.note_rejected_write()
                self.log.append(now, "reject_write", op.key)
                continue
            self._commit(op.key, None if op.kind == OP_DELETE else op.value, attach=True)
        return reads

    def _post_flip_read(self, key: Key):
        # The generator wants current values for updates; post flip the new
        # store is the truth, so serve the mapped view without fault draws.
        for rule in self.schema.rules_for_source(key.etype):
            for tkey in rule.target_keys(key.id):
                rec = self.target.peek(tkey)
                if rec is not None and not rec.tombstone:
                    return SourceRecord(key, rec.value, VersionStamp(0, self.clock.now), False)
        return None

    def _native_write(self, op) -> None:
        tomb = op.kind == OP_DELETE
        value = {} if tomb else dict(op.value)
        for rule in self.schema.rules_for_source(op.key.etype):
            for tkey in rule.target_keys(op.key.id):
                try:
                    self.target.put_native(TargetRecord(tkey, value, {}, tomb))
                except StoreUnavailable:
                    pass  # ordinary availability, client-visible, no repair loop

    def _native_read(self, key: Key) -> None:
        for rule in self.schema.rules_for_source(key.etype):
            for tkey in rule.target_keys(key.id):
                try:
                    self.target.get(tkey)
                except StoreUnavailable:
                    pass

    def flip_measurements(self, now: int) -> tuple[int, int]:
        """At the flip: unsettled source updates and the residual exact diff."""
        lost = self.settlement.unsettled_count()
        overall, settled, counts = consistency_rate(
            self.schema,
            self.legacy.records,
            self.target.records,
            now,
            self._staleness_bound(now),
        )
        discrepancies = sum(
            n for cls, n in counts.items() if cls is not DiscrepancyClass.CONSISTENT
        )
        self.flip_rates = (overall, settled)
        return lost, discrepancies

    def _staleness_bound(self, now: int) -> int:
        override = self.scenario.metrics.staleness_bound_override
        if override is not None:
            return override
        window = self.scenario.metrics.ttc_window
        observed = self.settlement.settled_latency_max(now - window, now)
        return max(2 * observed, self.scenario.metrics.staleness_floor)

    def phase_label(self, now: int) -> str:
        if self.ramp is not None and self.ramp.flipped:
            return "post"
        if self.ramp is not None and self.scenario.ramp.enabled and now >= self.scenario.ramp.time:
            return "ramp"
        job = self.bootstrap_job
        if self.scenario.bootstrap.enabled:
            if job is None or not job.done:
                return "bootstrap"
            finished = job.report.finished_at
            if finished is not None and now <= finished + 30:
                return "settling"
        return "steady"

    def sample_report(self, now: int, record: bool = True) -> ConsistencyReport:
        bound = self._staleness_bound(now)
        if self.ramp is not None and self.ramp.flipped and self.flip_rates is not None:
            overall, settled = self.flip_rates
            expected = bad = 0
        else:
            overall, settled, expected, bad = self.ctracker.rates(now, bound)
        qlen, age = loop_gauges(self.queue, now)
        report = ConsistencyReport(
            at=now,
            phase=self.phase_label(now),
            overall_rate=overall,
            settled_rate=settled,
            queue_length=qlen,
            max_in_loop_age=age,
            staleness_bound=bound,
            expected_keys=expected,
            inconsistent_keys=bad,
        )
        if record:
            # window_ttc is filled after the run, when every settlement in
            # the window is known; recorded samples stay definition-exact.
            self.samples.append(report)
            self.log.append(
                now, "sample",
                overall=round(overall, 9), settled=round(settled, 9),
                qlen=qlen, age=age, bound=bound, phase=report.phase,
            )
        else:
            # Causal view for clearance checks: any unsettled update in the
            # window legitimately shows up as an undefined TTC and blocks.
            report.window_ttc = self.settlement.window_ttc(
                now - self.scenario.metrics.ttc_window, now
            )
        return report


def run_scenario(
    scenario: Scenario, seed: int | None = None, out_dir: str | Path | None = None
) -> SimResult:
    """Execute one scenario end to end and assemble its report."""
    use_seed = scenario.seed if seed is None else seed
    sim = _SimState(scenario, use_seed)
    scn = scenario
    status = _RampStatus(sim)

    sim.seed_phase()
    stream_start = sim.legacy.max_seq() + 1
    if scn.toggles.enable_nearline:
        sim.stream.subscribe(sim.nearline.on_delivery, stream_start)

    for now in range(scn.duration + 1):
        sim.clock.now = now
        sim.limiter.begin_tick(now)
        if sim.ramp is not None and not sim.ramp.finished:
            sim.ramp.step(now, status)
        flipped = sim.ramp.flipped if sim.ramp else False

        ops_before = sim.target.op_count
        reads = sim.workload_phase(now)

        if not flipped:
            sim.target.writer_class = "dual"
            sim.dualwriter.run_due(now)
            sim.stream.deliver_due(now)
            sim.target.writer_class = "live"
            sim.nearline.run_due(now)
            if scn.toggles.enable_shadow:
                for skey, rec in reads:
                    sim.shadow.on_read(skey, rec, now)
        sim.limiter.note_live(sim.target.op_count - ops_before)

        if (
            not flipped
            and scn.offline.enabled
            and now > 0
            and now % scn.offline.interval == 0
        ):
            snap = sim.legacy.take_snapshot(now)
            sim.log.append(
                now, "snapshot", taken=snap.taken_at, lut=snap.last_update_time, n=len(snap)
            )
            sim.offline.run(snap, sim.target.frozen_view(), scn.offline.cutoff, now)

        if (
            scn.bug is not None
            and scn.bug.requeue_at is not None
            and now == scn.bug.requeue_at
        ):
            sim.queue.requeue_dead_letters(now)

        if not flipped:
            ops_before = sim.target.op_count
            sim.target.writer_class = "repair"
            sim.healer.process(now)
            sim.target.writer_class = "live"
            sim.limiter.note_backfill(sim.target.op_count - ops_before)

        if scn.bootstrap.enabled and not flipped:
            if sim.bootstrap_job is None and now >= scn.bootstrap.at:
                snap = sim.legacy.take_snapshot(now)
                sim.log.append(
                    now, "snapshot", taken=snap.taken_at,
                    lut=snap.last_update_time, n=len(snap),
                )
                sim.bootstrap_job = BootstrapJob(
                    sim.schema, snap, sim.target, sim.queue, sim.registry,
                    sim.log, mode=scn.bootstrap.mode, start_at=now,
                )
            if sim.bootstrap_job is not None and not sim.bootstrap_job.done:
                sim.target.writer_class = "backfill"
                sim.bootstrap_job.step(now, sim.limiter)
                sim.target.writer_class = "live"

        if now % scn.metrics.sample_interval == 0 or now == scn.duration:
            sim.sample_report(now)

    sim.limiter.finish()
    sim.registry.check_algebra()

    # Window TTC per sample, with full end-of-run settlement knowledge.
    update_pairs = sim.settlement.updates_as_pairs()
    for sample in sim.samples:
        sample.window_ttc = time_to_converge(
            update_pairs, sample.at - scn.metrics.ttc_window, sample.at
        )

    report = _assemble_report(sim)
    if scn.toggles.run_oracle:
        oracle_report = oracle_verify(sim.log.entries, scn, report.as_dict())
        report.oracle = oracle_report.as_dict()
        sim_oracle = oracle_report
    else:
        sim_oracle = None
    report.expect_failures = _check_expectations(scn, report)

    result = SimResult(
        report=report,
        log=sim.log,
        schema=sim.schema,
        legacy=sim.legacy,
        target=sim.target,
        queue=sim.queue,
        registry=sim.registry,
        settlement=sim.settlement,
        limiter=sim.limiter,
        live_ops=sim.live_ops,
        oracle_report=sim_oracle,
    )
    if out_dir is not None:
        _write_artifacts(result, scn, Path(out_dir))
    return result


def _assemble_report(sim: _SimState) -> RunReport:
    scn = sim.scenario
    flipped = sim.ramp is not None and sim.ramp.flipped
    if flipped and sim.flip_rates is not None:
        final_overall, final_settled = sim.flip_rates
        counts: dict = {}
    else:
        final_overall, final_settled, class_counts = consistency_rate(
            sim.schema, sim.legacy.records, sim.target.records,
            scn.duration, sim._staleness_bound(scn.duration),
        )
        counts = {cls.value: n for cls, n in class_counts.items() if n}
    n_initial = scn.workload.initial_records
    report = RunReport(
        name=scn.name,
        seed=sim.seed,
        duration=scn.duration,
        initial_records=n_initial,
        samples=sim.samples,
        bootstrap=sim.bootstrap_job.report.as_dict() if sim.bootstrap_job else None,
        switch=sim.ramp.report.as_dict() if sim.ramp else None,
        counters=sim.registry.counters_dict(),
        attempts_total=sim.registry.attempts_total,
        attempts_ratio=(
            sim.registry.attempts_total / n_initial if n_initial > 0 else None
        ),
        dead_letters=[
            [list(d.event.target_key), d.last_error] for d in sim.queue.dead_letters()
        ],
        final_overall=final_overall,
        final_settled=final_settled,
        final_counts=counts,
        rejected_writes=sim.rejected_writes,
        log_digest=sim.log.digest(),
    )
    return report


def _check_expectations(scn: Scenario, report: RunReport) -> list[str]:
    expect = scn.expect
    failures: list[str] = []
    if expect.outcome is not None:
        got = report.switch["outcome"] if report.switch else "none"
        if got != expect.outcome:
            failures.append(f"outcome {got!r} != expected {expect.outcome!r}")
    if expect.max_attempts_ratio is not None and report.attempts_ratio is not None:
        if report.attempts_ratio > expect.max_attempts_ratio:
            failures.append(
                f"attempts ratio {report.attempts_ratio:.4f} > {expect.max_attempts_ratio}"
            )
    if expect.min_attempts_ratio is not None and report.attempts_ratio is not None:
        if report.attempts_ratio < expect.min_attempts_ratio:
            failures.append(
                f"attempts ratio {report.attempts_ratio:.4f} < {expect.min_attempts_ratio}"
            )
    if expect.final_settled_rate is not None:
        if report.final_settled < expect.final_settled_rate:
            failures.append(
                f"final settled rate {report.final_settled:.6f} < {expect.final_settled_rate}"
            )
    if expect.zero_dead_letters and report.dead_letters:
        failures.append(f"{len(report.dead_letters)} dead letters, expected none")
    if expect.lost_updates_positive:
        lost = report.switch["lost_updates"] if report.switch else 0
        if lost <= 0:
            failures.append("expected lost updates > 0")
    return failures


def _write_artifacts(result: SimResult, scenario: Scenario, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scenario.json").write_text(serialize(scenario), encoding="utf-8")
    with open(out_dir / "eventlog.jsonl", "w", encoding="utf-8") as fh:
        for line in result.log.export_lines():
            fh.write(line + "\n")
    (out_dir / "report.json").write_text(
        json.dumps(result.report.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    if result.oracle_report is not None:
        (out_dir / "oracle.txt").write_text(
            result.oracle_report.to_text() + "\n", encoding="utf-8"
        )
