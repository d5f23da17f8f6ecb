"""Influence tracking and isolation / fairness verification.

Every model the engine derives carries an :class:`InfluenceSet`, the set of
``(client, round)`` contributions that entered it transitively. Separately,
the engine records a lineage graph of :class:`LineageNode` objects. The
checkers in this module ignore the engine's own influence sets and replay
influence from the lineage graph with plain frozensets, so a bug in either
path shows up as a disagreement between the two.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Sequence

from .policy import Depth, DisagreementType, RewindMode, ScenarioConfig, client_name

if TYPE_CHECKING:
    from .engine import RoundRecord

CONTAMINATION = "contamination"
UNFAIRNESS = "unfairness"


class LineageError(RuntimeError):
    pass


class InfluenceSet:
    """Immutable set of ``(client, round)`` pairs.

    Stored per client as sorted, disjoint, half-open round intervals, so a
    client that contributed to every round of a long run costs one interval.
    """

    __slots__ = ("_iv", "_hash")

    def __init__(self, pairs: Iterable[tuple[int, int]] = ()):
        per: dict[int, list[int]] = defaultdict(list)
        for c, r in pairs:
            per[c].append(r)
        self._iv = {c: _compress(sorted(set(rs))) for c, rs in sorted(per.items())}
        self._hash = None

    @classmethod
    def _from_intervals(cls, iv: dict[int, tuple[tuple[int, int], ...]]) -> InfluenceSet:
        obj = cls.__new__(cls)
        obj._iv = iv
        obj._hash = None
        return obj

    @classmethod
    def from_intervals(cls, data: dict[int, Sequence[Sequence[int]]]) -> InfluenceSet:
        merged = {int(c): _merge([tuple(map(int, iv)) for iv in ivs]) for c, ivs in data.items() if ivs}
        return cls._from_intervals(dict(sorted(merged.items())))

    def intervals(self) -> dict[int, tuple[tuple[int, int], ...]]:
        return dict(self._iv)

    def with_pair(self, client: int, round: int) -> InfluenceSet:
        iv = dict(self._iv)
        iv[client] = _merge(list(iv.get(client, ())) + [(round, round + 1)])
        return InfluenceSet._from_intervals(dict(sorted(iv.items())))

    def union(self, *others: InfluenceSet) -> InfluenceSet:
        if not others:
            return self
        per: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for s in (self, *others):
            for c, ivs in s._iv.items():
                per[c].extend(ivs)
        return InfluenceSet._from_intervals({c: _merge(ivs) for c, ivs in sorted(per.items())})

    def clients(self) -> frozenset[int]:
        return frozenset(self._iv)

    def rounds_of(self, client: int) -> list[int]:
        return [r for lo, hi in self._iv.get(client, ()) for r in range(lo, hi)]

    def latest(self, client: int) -> int | None:
        ivs = self._iv.get(client)
        return ivs[-1][1] - 1 if ivs else None

    def has_from(self, client: int, cutoff: int) -> bool:
        """True if some ``(client, r)`` with ``r >= cutoff`` is present."""
        last = self.latest(client)
        return last is not None and last >= cutoff

    def pairs(self) -> frozenset[tuple[int, int]]:
        return frozenset(iter(self))

    def __iter__(self) -> Iterator[tuple[int, int]]:
        for c, ivs in self._iv.items():
            for lo, hi in ivs:
                for r in range(lo, hi):
                    yield (c, r)

    def __contains__(self, pair: object) -> bool:
        c, r = pair  # type: ignore[misc]
        ivs = self._iv.get(c)
        if not ivs:
            return False
        i = bisect.bisect_right(ivs, (r, float("inf"))) - 1
        return i >= 0 and ivs[i][0] <= r < ivs[i][1]

    def __len__(self) -> int:
        return sum(hi - lo for ivs in self._iv.values() for lo, hi in ivs)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, InfluenceSet):
            return self._iv == other._iv
        if isinstance(other, (set, frozenset)):
            return self.pairs() == other
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(tuple(self._iv.items()))
        return self._hash

    def __repr__(self) -> str:
        body = ", ".join(f"{client_name(c)}:{list(ivs)}" for c, ivs in self._iv.items())
        return f"InfluenceSet({body})"


EMPTY = InfluenceSet()


def _compress(rounds: list[int]) -> tuple[tuple[int, int], ...]:
    out: list[tuple[int, int]] = []
    for r in rounds:
        if out and out[-1][1] == r:
            out[-1] = (out[-1][0], r + 1)
        else:
            out.append((r, r + 1))
    return tuple(out)


def _merge(ivs: list[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    ivs.sort()
    out: list[tuple[int, int]] = []
    for lo, hi in ivs:
        if out and lo <= out[-1][1]:
            if hi > out[-1][1]:
                out[-1] = (out[-1][0], hi)
        else:
            out.append((lo, hi))
    return tuple(out)


def derive_influence(
    base: InfluenceSet, contributor: tuple[int, int] | None = None, merged: Iterable[InfluenceSet] = ()
) -> InfluenceSet:
    out = base.union(*merged)
    if contributor is not None:
        out = out.with_pair(*contributor)
    return out


# -- lineage ----------------------------------------------------------------


@dataclass(frozen=True)
class LineageNode:
    """One derived model.

    ``kind`` is one of ``init``, ``seed``, ``update``, ``aggregate``,
    ``rewind-update``, ``rewind-aggregate`` and ``rewind``. Update nodes
    carry the ``(client, round)`` pair they contribute; rewind nodes carry
    the clients whose direct contributions they must omit.
    """

    ref: str
    kind: str
    round: int
    track: str | None = None
    parents: tuple[str, ...] = ()
    contributor: tuple[int, int] | None = None
    excluded: frozenset[int] = frozenset()

    def to_json(self) -> dict:
        out = {"ref": self.ref, "kind": self.kind, "round": self.round, "track": self.track, "parents": list(self.parents)}
        if self.contributor is not None:
            out["contributor"] = list(self.contributor)
        if self.excluded:
            out["excluded"] = sorted(self.excluded)
        return out

    @classmethod
    def from_json(cls, raw: dict) -> LineageNode:
        contrib = raw.get("contributor")
        return cls(
            ref=raw["ref"],
            kind=raw["kind"],
            round=int(raw["round"]),
            track=raw.get("track"),
            parents=tuple(raw.get("parents", ())),
            contributor=None if contrib is None else (int(contrib[0]), int(contrib[1])),
            excluded=frozenset(raw.get("excluded", ())),
        )


INIT_NODE = LineageNode(ref="init", kind="init", round=-1)


@dataclass(frozen=True)
class Violation:
    kind: str
    round: int
    client: int
    offender: str
    detail: str

    def row(self) -> list[str]:
        return [self.kind, str(self.round), client_name(self.client), self.offender, self.detail]


@dataclass(frozen=True)
class Residual:
    """Trajectory influence left behind by a re-aggregation rewind."""

    round: int
    client: int
    excluded: int
    pairs: tuple[tuple[int, int], ...]


class InfluenceReplay:
    """Recompute influence of lineage nodes from the graph alone."""

    def __init__(self, nodes: Iterable[LineageNode]):
        self.nodes: dict[str, LineageNode] = {INIT_NODE.ref: INIT_NODE}
        for n in nodes:
            self.nodes[n.ref] = n
        self._memo: dict[str, frozenset[tuple[int, int]]] = {}

    def node(self, ref: str) -> LineageNode:
        try:
            return self.nodes[ref]
        except KeyError:
            raise LineageError(f"lineage incomplete: unknown model {ref!r}") from None

    def influence(self, ref: str) -> frozenset[tuple[int, int]]:
        memo = self._memo.get(ref)
        if memo is not None:
            return memo
        # iterative post-order walk; lineage chains can be as long as the run
        stack = [ref]
        while stack:
            top = stack[-1]
            if top in self._memo:
                stack.pop()
                continue
            node = self.node(top)
            pending = [p for p in node.parents if p not in self._memo]
            if pending:
                stack.extend(pending)
                continue
            acc: set[tuple[int, int]] = set()
            for p in node.parents:
                acc |= self._memo[p]
            if node.contributor is not None:
                acc.add(node.contributor)
            self._memo[top] = frozenset(acc)
            stack.pop()
        return self._memo[ref]

    def direct_contributors(self, ref: str) -> set[int]:
        node = self.node(ref)
        return {self.node(p).contributor[0] for p in node.parents if self.node(p).contributor is not None}


def _lineage(run: Sequence[RoundRecord]) -> InfluenceReplay:
    return InfluenceReplay(n for rec in run for n in rec.lineage)


def exclusion_cutoffs(config: ScenarioConfig, round: int) -> dict[int, dict[int, int]]:
    """For each client, the clients it must not receive influence from and the
    earliest round from which that influence is forbidden.

    Evaluated straight from the disagreement list (not via the resolver).
    A cutoff of ``-1`` forbids every round.
    """
    strict_deep = config.rewind_mode is RewindMode.RETRAIN
    out: dict[int, dict[int, int]] = defaultdict(dict)

    def forbid(a: int, b: int, cutoff: int) -> None:
        prev = out[a].get(b)
        out[a][b] = cutoff if prev is None else min(prev, cutoff)

    for d in config.disagreements:
        if not (d.start_round <= round and (d.duration is None or round < d.start_round + d.duration)):
            continue
        cutoff = -1 if (d.depth is Depth.DEEP and strict_deep) else d.start_round
        if d.type is DisagreementType.INBOUND:
            forbid(d.initiator, d.target, cutoff)
        elif d.type is DisagreementType.OUTBOUND:
            forbid(d.target, d.initiator, cutoff)
        elif d.type is DisagreementType.BIDIRECTIONAL:
            forbid(d.initiator, d.target, cutoff)
            forbid(d.target, d.initiator, cutoff)
        elif d.type is DisagreementType.FULL:
            for other in range(config.client_count):
                if other != d.initiator:
                    forbid(other, d.initiator, cutoff)
    return dict(out)


def check_isolation(run: Sequence[RoundRecord], config: ScenarioConfig) -> list[Violation]:
    """Contamination findings: leaked pairs in delivered models, plus rebuilt
    aggregates that still take a direct update from an excluded client."""
    replay = _lineage(run)
    violations: list[Violation] = []
    for rec in run:
        cutoffs = exclusion_cutoffs(config, rec.round)
        for a, ref in sorted(rec.delivered.items()):
            forbidden = cutoffs.get(a)
            if not forbidden:
                continue
            infl = replay.influence(ref)
            for b, cutoff in sorted(forbidden.items()):
                leaked = sorted(r for c, r in infl if c == b and r >= cutoff)
                if leaked:
                    violations.append(
                        Violation(
                            CONTAMINATION,
                            rec.round,
                            a,
                            f"({client_name(b)},{leaked[0]})",
                            f"model delivered to {client_name(a)} holds {len(leaked)} round(s) of "
                            f"{client_name(b)} influence from round {leaked[0]} on",
                        )
                    )
    violations.extend(check_rewinds(run, replay))
    return violations


def check_rewinds(run: Sequence[RoundRecord], replay: InfluenceReplay | None = None) -> list[Violation]:
    replay = replay or _lineage(run)
    out: list[Violation] = []
    for rec in run:
        for node in rec.lineage:
            if node.kind != "rewind-aggregate" or not node.excluded:
                continue
            leaked = replay.direct_contributors(node.ref) & node.excluded
            for b in sorted(leaked):
                out.append(
                    Violation(
                        CONTAMINATION,
                        rec.round,
                        b,
                        node.ref,
                        f"rebuilt aggregate for historical round {node.round} still includes a direct update from {client_name(b)}",
                    )
                )
    return out


def check_fairness(run: Sequence[RoundRecord], config: ScenarioConfig) -> list[Violation]:
    """Flag aggregated updates that were not trained from the aggregating
    model's own start-of-round state."""
    replay = _lineage(run)

    def origin(ref: str) -> str:
        # seed nodes copy their parent's weights unchanged
        node = replay.node(ref)
        while node.kind == "seed":
            node = replay.node(node.parents[0])
        return node.ref

    out: list[Violation] = []
    for rec in run:
        updates = {u.ref: u for u in rec.updates}
        owners = {}
        for c, tid in rec.plan.primary.items():
            owners.setdefault(tid, []).append(c)
        for tid, refs in sorted(rec.aggregated.items()):
            start = rec.track_start.get(tid)
            if start is None:
                raise LineageError(f"lineage incomplete: no start model for {tid} in round {rec.round}")
            for ref in refs:
                u = updates.get(ref)
                if u is None:
                    raise LineageError(f"lineage incomplete: unknown update {ref!r} in round {rec.round}")
                if u.base_ref != start and origin(u.base_ref) != origin(start):
                    for victim in sorted(owners.get(tid, [])):
                        out.append(
                            Violation(
                                UNFAIRNESS,
                                rec.round,
                                victim,
                                f"{client_name(u.client)}:{u.base_ref}",
                                f"{client_name(u.client)}'s contribution to {client_name(victim)}'s model was "
                                f"trained from {u.base_ref} instead of {start}",
                            )
                        )
    return out


def deep_residuals(run: Sequence[RoundRecord], config: ScenarioConfig) -> list[Residual]:
    """Pre-activation influence of deep-excluded clients that survives in
    delivered models (only possible with re-aggregation rewinds)."""
    replay = _lineage(run)
    out: list[Residual] = []
    for rec in run:
        for d in config.disagreements:
            if d.depth is not Depth.DEEP or not d.active_at(rec.round):
                continue
            pairs = []
            if d.type is DisagreementType.INBOUND:
                pairs = [(d.initiator, d.target)]
            elif d.type is DisagreementType.OUTBOUND:
                pairs = [(d.target, d.initiator)]
            elif d.type is DisagreementType.BIDIRECTIONAL:
                pairs = [(d.initiator, d.target), (d.target, d.initiator)]
            elif d.type is DisagreementType.FULL:
                pairs = [(o, d.initiator) for o in range(config.client_count) if o != d.initiator]
            for a, b in pairs:
                ref = rec.delivered.get(a)
                if ref is None:
                    continue
                left = tuple(sorted(p for p in replay.influence(ref) if p[0] == b))
                if left:
                    out.append(Residual(rec.round, a, b, left))
    return out


def cross_check_influence(run: Sequence[RoundRecord]) -> list[str]:
    """Refs whose engine-side influence differs from the lineage replay."""
    replay = _lineage(run)
    bad = []
    for rec in run:
        for tid, infl in rec.influence.items():
            ref = rec.track_aggregate[tid]
            if infl.pairs() != replay.influence(ref):
                bad.append(ref)
    return bad


@dataclass
class VerificationReport:
    isolation: list[Violation] = field(default_factory=list)
    fairness: list[Violation] = field(default_factory=list)
    residuals: list[Residual] = field(default_factory=list)
    influence_mismatches: list[str] = field(default_factory=list)

    @property
    def violations(self) -> list[Violation]:
        return self.isolation + self.fairness


def verify(run: Sequence[RoundRecord], config: ScenarioConfig) -> VerificationReport:
    return VerificationReport(
        isolation=check_isolation(run, config),
        fairness=check_fairness(run, config),
        residuals=deep_residuals(run, config),
        influence_mismatches=cross_check_influence(run),
    )
