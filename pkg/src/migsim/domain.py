"""Entity model, record versioning, mapping rules, and the dependency graph.

The translation layer is deliberately declarative: a schema is a set of
entity types with parent links plus mapping rules that are pure functions
from source records to target records.  Everything downstream (dual writes,
repair, verification) leans on two facts established here: transforms are
deterministic, and every produced record carries a provenance vector naming
the exact source versions it was derived from.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, NamedTuple

PARENT_REF_PREFIX = "parent_"

# Counter value reserved for provenance stamps attached by bulk loads that
# only know the snapshot time, not the per-record commit counter.
BOOTSTRAP_COUNTER = 0


class SchemaError(Exception):
    """Invalid schema definition."""


class CycleError(SchemaError):
    """The declared dependency relation contains a cycle."""

    def __init__(self, cycle: tuple[str, ...]):
        self.cycle = cycle
        super().__init__("dependency cycle: " + " -> ".join(cycle + (cycle[0],)))


class UnknownTypeError(SchemaError):
    """A rule or parent link references a type that was never registered."""


class TransformError(Exception):
    """A rule failed on well-formed-looking input; the signature of a mapping bug."""


class Key(NamedTuple):
    etype: str
    id: str

    def __str__(self) -> str:
        return f"{self.etype}#{self.id}"


class VersionStamp(NamedTuple):
    counter: int  # per-key monotonic commit counter; BOOTSTRAP_COUNTER for defaults
    commit_time: int  # virtual-clock tick of the commit


def at_least_as_fresh(a: VersionStamp, b: VersionStamp) -> bool:
    """Freshness order over stamps.

    Real commits are ordered by their per-key counter.  A bootstrap default
    stamp has no counter, so whenever either side is a default the order
    falls back to commit time.
    """
    if a.counter > BOOTSTRAP_COUNTER and b.counter > BOOTSTRAP_COUNTER:
        return a.counter >= b.counter
    return a.commit_time >= b.commit_time


class SourceRecord(NamedTuple):
    key: Key
    value: Mapping[str, str]
    version: VersionStamp
    tombstone: bool


class TargetRecord(NamedTuple):
    key: Key
    value: Mapping[str, str]
    provenance: Mapping[Key, VersionStamp]
    tombstone: bool


def provenance_covers(
    actual: Mapping[Key, VersionStamp], wanted: Mapping[Key, VersionStamp]
) -> bool:
    """True when `actual` is at least as fresh as `wanted` on every entry."""
    for skey, stamp in wanted.items():
        have = actual.get(skey)
        if have is None or not at_least_as_fresh(have, stamp):
            return False
    return True


def provenance_regresses(
    incoming: Mapping[Key, VersionStamp], stored: Mapping[Key, VersionStamp]
) -> bool:
    """True when accepting `incoming` would lose freshness on any stored entry."""
    for skey, stamp in stored.items():
        have = incoming.get(skey)
        if have is None or not at_least_as_fresh(have, stamp):
            return True
    return False


class DiscrepancyClass(str, Enum):
    CONSISTENT = "consistent"
    MISSING = "missing"
    STALE = "stale"
    CORRUPT = "corrupt"
    UNEXPECTED_EXTRA = "unexpected_extra"
    RESURRECTION = "resurrection"


def compare_records(
    expected: TargetRecord | None, actual: TargetRecord | None
) -> DiscrepancyClass:
    """Classify one target key given its expected and observed state.

    Expected is the record produced by mapping the current source state
    (None when the sources never existed).  A deletion that simply never
    reached the target is treated as consistent: no live data is visible on
    either side.  A deletion that the target still shows live is the one
    state that must never survive repair, and gets its own class.
    """
    if expected is None:
        if actual is None or actual.tombstone:
            return DiscrepancyClass.CONSISTENT
        return DiscrepancyClass.UNEXPECTED_EXTRA
    if actual is None:
        if expected.tombstone:
            return DiscrepancyClass.CONSISTENT
        return DiscrepancyClass.MISSING
    if expected.tombstone and not actual.tombstone:
        return DiscrepancyClass.RESURRECTION
    if not provenance_covers(actual.provenance, expected.provenance):
        return DiscrepancyClass.STALE
    if actual.tombstone == expected.tombstone and actual.value == expected.value:
        return DiscrepancyClass.CONSISTENT
    return DiscrepancyClass.CORRUPT


def compare(
    expected: Mapping[Key, TargetRecord], actual: Mapping[Key, TargetRecord]
) -> dict[Key, DiscrepancyClass]:
    """Classify every key present on either side."""
    out: dict[Key, DiscrepancyClass] = {}
    for key in sorted(set(expected) | set(actual)):
        out[key] = compare_records(expected.get(key), actual.get(key))
    return out


@dataclass(frozen=True)
class EntityType:
    name: str
    parents: frozenset[str] = frozenset()


Transform = Callable[[Mapping[Key, SourceRecord]], Iterable[tuple[Key, Mapping[str, str]]]]


@dataclass(frozen=True)
class MappingRule:
    """Declarative translation of one group of source entities.

    Instances of the rule are aligned by id: the group with id `g` consumes
    `(st, g)` for every source type and produces `(tt, g)` for every target
    type.  `transform` only sees the record values; provenance and tombstone
    propagation are applied uniformly by `map_source`.
    """

    name: str
    source_types: tuple[str, ...]
    target_types: tuple[str, ...]
    transform: Transform

    def input_keys(self, gid: str) -> tuple[Key, ...]:
        return tuple(Key(st, gid) for st in self.source_types)

    def target_keys(self, gid: str) -> tuple[Key, ...]:
        return tuple(Key(tt, gid) for tt in self.target_types)

    def key_map(self, skey: Key) -> tuple[tuple[Key, ...], tuple[Key, ...]]:
        """Target keys affected by a source key, plus the full co-input set."""
        return self.target_keys(skey.id), self.input_keys(skey.id)


def map_source(rule: MappingRule, sources: Mapping[Key, SourceRecord]) -> tuple[TargetRecord, ...]:
    """Apply one rule to the present source records of a group.

    Output provenance is exactly the versions of the consumed records.  If
    every consumed record is a tombstone the outputs are tombstones too, so
    deletions survive translation.  An empty input set produces nothing.
    Transforms must return fresh (or never-mutated) value mappings; they are
    attached to the produced records without copying.
    """
    if not sources:
        return ()
    provenance = {k: rec.version for k, rec in sources.items()}
    gid = next(iter(sources)).id
    if all(rec.tombstone for rec in sources.values()):
        return tuple(
            TargetRecord(tk, {}, provenance, True) for tk in rule.target_keys(gid)
        )
    outputs = rule.transform(sources)
    return tuple(
        TargetRecord(tk, value, provenance, False) for tk, value in outputs
    )


def identity_rule(name: str, source: str, target: str) -> MappingRule:
    def transform(sources: Mapping[Key, SourceRecord]):
        (rec,) = [r for r in sources.values() if not r.tombstone]
        if not isinstance(rec.value, Mapping):
            raise TransformError(f"{name}: value of {rec.key} is not a field map")
        return [(Key(target, rec.key.id), dict(rec.value))]

    return MappingRule(name, (source,), (target,), transform)


def split_rule(name: str, source: str, targets: Iterable[tuple[str, Iterable[str]]]) -> MappingRule:
    parts = tuple((tt, tuple(fields)) for tt, fields in targets)

    def transform(sources: Mapping[Key, SourceRecord]):
        (rec,) = [r for r in sources.values() if not r.tombstone]
        if not isinstance(rec.value, Mapping):
            raise TransformError(f"{name}: value of {rec.key} is not a field map")
        out = []
        for tt, fields in parts:
            out.append((Key(tt, rec.key.id), {f: rec.value[f] for f in fields if f in rec.value}))
        return out

    return MappingRule(name, (source,), tuple(tt for tt, _ in parts), transform)


def merge_rule(name: str, sources: Iterable[str], target: str) -> MappingRule:
    stypes = tuple(sources)

    def transform(recs: Mapping[Key, SourceRecord]):
        gid = next(iter(recs)).id
        merged: dict[str, str] = {}
        for st in stypes:
            rec = recs.get(Key(st, gid))
            if rec is None or rec.tombstone:
                continue
            if not isinstance(rec.value, Mapping):
                raise TransformError(f"{name}: value of {rec.key} is not a field map")
            for fname, fval in rec.value.items():
                merged[f"{st}_{fname}"] = fval
        return [(Key(target, gid), merged)]

    return MappingRule(name, stypes, (target,), transform)


class Schema:
    """Registered entity types and rules with frozen topological orders."""

    def __init__(self, types: Iterable[EntityType], rules: Iterable[MappingRule]):
        self.types: dict[str, EntityType] = {}
        for et in types:
            if et.name in self.types:
                raise SchemaError(f"duplicate entity type {et.name!r}")
            self.types[et.name] = et
        for et in self.types.values():
            for parent in et.parents:
                if parent not in self.types:
                    raise UnknownTypeError(
                        f"type {et.name!r} depends on unregistered type {parent!r}"
                    )
        self.source_order: tuple[str, ...] = _toposort(
            {name: set(et.parents) for name, et in self.types.items()}
        )

        self.rules: tuple[MappingRule, ...] = tuple(rules)
        self._rules_by_source: dict[str, list[MappingRule]] = {}
        self._rule_by_target: dict[str, MappingRule] = {}
        for rule in self.rules:
            for st in rule.source_types:
                if st not in self.types:
                    raise UnknownTypeError(f"rule {rule.name!r} consumes unknown type {st!r}")
                self._rules_by_source.setdefault(st, []).append(rule)
            for tt in rule.target_types:
                if tt in self._rule_by_target:
                    raise SchemaError(f"target type {tt!r} produced by more than one rule")
                if tt in self.types:
                    raise SchemaError(f"target type {tt!r} collides with a source type")
                self._rule_by_target[tt] = rule

        self.target_order: tuple[str, ...] = _toposort(self._target_parents())
        self._target_rank = {tt: i for i, tt in enumerate(self.target_order)}

    def _target_parents(self) -> dict[str, set[str]]:
        """Dependency relation induced on target types via the rules."""
        parents: dict[str, set[str]] = {tt: set() for tt in self._rule_by_target}
        for tt, rule in self._rule_by_target.items():
            for st in rule.source_types:
                for parent_source in self.types[st].parents:
                    for prule in self._rules_by_source.get(parent_source, []):
                        parents[tt].update(t for t in prule.target_types if t != tt)
        return parents

    def topo_order(self) -> tuple[str, ...]:
        """Source entity types, every parent before any of its children."""
        return self.source_order

    def target_topo_order(self) -> tuple[str, ...]:
        return self.target_order

    def target_rank(self, ttype: str) -> int:
        return self._target_rank[ttype]

    def rules_for_source(self, etype: str) -> tuple[MappingRule, ...]:
        return tuple(self._rules_by_source.get(etype, ()))

    def rule_for_target(self, ttype: str) -> MappingRule:
        try:
            return self._rule_by_target[ttype]
        except KeyError:
            raise UnknownTypeError(f"no rule produces target type {ttype!r}") from None

    def affected_targets(self, skey: Key) -> tuple[Key, ...]:
        """All target keys whose expected state depends on a source key."""
        out: list[Key] = []
        for rule in self.rules_for_source(skey.etype):
            out.extend(rule.target_keys(skey.id))
        return tuple(sorted(set(out)))

    def parent_source_keys(self, record: SourceRecord) -> tuple[Key, ...]:
        """Parent instances referenced by a record via its parent_* fields."""
        et = self.types[record.key.etype]
        keys = []
        for ptype in sorted(et.parents):
            ref = record.value.get(PARENT_REF_PREFIX + ptype)
            if ref is not None:
                keys.append(Key(ptype, ref))
        return tuple(keys)

    def parent_target_keys(self, sources: Mapping[Key, SourceRecord]) -> tuple[Key, ...]:
        """Target records that must exist before this group's live outputs."""
        out: set[Key] = set()
        for rec in sources.values():
            if rec.tombstone:
                continue
            for pkey in self.parent_source_keys(rec):
                out.update(self.affected_targets(pkey))
        return tuple(sorted(out))

    def group_expected(
        self, rule: MappingRule, gid: str, read: Callable[[Key], SourceRecord | None]
    ) -> tuple[dict[Key, TargetRecord], dict[Key, SourceRecord]]:
        """Expected target records for one rule group, plus the inputs read."""
        sources: dict[Key, SourceRecord] = {}
        for k in rule.input_keys(gid):
            rec = read(k)
            if rec is not None:
                sources[k] = rec
        expected = {r.key: r for r in map_source(rule, sources)}
        return expected, sources


def register_schema(types: Iterable[EntityType], rules: Iterable[MappingRule]) -> Schema:
    """Validate and freeze a schema; raises CycleError / UnknownTypeError."""
    return Schema(types, rules)


def _toposort(parents: dict[str, set[str]]) -> tuple[str, ...]:
    """Dependency-first order with a lexicographic tie-break.

    `parents[n]` is the set of nodes n depends on; every parent precedes all
    of its children in the result.  Raises CycleError naming one cycle.
    """
    remaining = {n: set(p) for n, p in parents.items()}
    ready = [n for n, p in sorted(remaining.items()) if not p]
    heapq.heapify(ready)
    dependants: dict[str, list[str]] = {n: [] for n in remaining}
    for n, p in remaining.items():
        for parent in p:
            dependants[parent].append(n)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in sorted(dependants[node]):
            remaining[child].discard(node)
            if not remaining[child]:
                heapq.heappush(ready, child)
    if len(order) != len(parents):
        raise CycleError(_find_cycle(parents))
    return tuple(order)


def _find_cycle(parents: dict[str, set[str]]) -> tuple[str, ...]:
    seen: set[str] = set()
    for start in sorted(parents):
        path: list[str] = []
        on_path: set[str] = set()

        def walk(node: str) -> tuple[str, ...] | None:
            if node in on_path:
                idx = path.index(node)
                return tuple(path[idx:])
            if node in seen:
                return None
            seen.add(node)
            path.append(node)
            on_path.add(node)
            for parent in sorted(parents.get(node, ())):
                found = walk(parent)
                if found:
                    return found
            path.pop()
            on_path.discard(node)
            return None

        cycle = walk(start)
        if cycle:
            return cycle
    return tuple(sorted(parents))
