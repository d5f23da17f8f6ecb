"""Translate active disagreements into isolated model tracks.

``resolve`` turns the active rules of a round into a :class:`TrackPlan`:
every distinct inbound-centric exclusion pattern gets a candidate track whose
members are everyone not excluded by that pattern, and candidates with the
same member set are merged (submodel reuse). ``naive_resolve`` is the
per-client personalised baseline and ``oracle_resolve`` an independent
brute-force derivation used to cross-check ``resolve``.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from typing import Hashable, Iterable, Mapping

from .policy import Disagreement, DisagreementType, client_name

FULL = DisagreementType.FULL
INBOUND = DisagreementType.INBOUND
OUTBOUND = DisagreementType.OUTBOUND
BIDIRECTIONAL = DisagreementType.BIDIRECTIONAL

ORACLE_MAX_CLIENTS = 12


class ResolutionError(RuntimeError):
    pass


@lru_cache(maxsize=65536)
def track_id(members: frozenset[int]) -> str:
    """Stable name for a member set: ``track_`` plus a digest of the sorted ids."""
    key = ",".join(map(str, sorted(members)))
    return "track_" + hashlib.blake2b(key.encode(), digest_size=6).hexdigest()


@dataclass(frozen=True)
class ExclusionView:
    exclusion_map: Mapping[int, frozenset[int]]
    fully_excluded: frozenset[int]


@dataclass(frozen=True)
class TrackPlan:
    tracks: Mapping[str, frozenset[int]]
    primary: Mapping[int, str]
    fully_excluded: frozenset[int] = frozenset()

    def family(self) -> set[frozenset[int]]:
        return set(self.tracks.values())

    def primaries_of(self, tid: str) -> list[int]:
        return sorted(c for c, t in self.primary.items() if t == tid)

    def tracks_of(self, client: int) -> list[str]:
        return sorted(t for t, m in self.tracks.items() if client in m)

    def primary_members(self) -> dict[int, frozenset[int]]:
        return {c: self.tracks[t] for c, t in self.primary.items()}

    def dump(self) -> str:
        """One line per track: ``trackId: members | primaries``."""
        lines = []
        for tid in sorted(self.tracks):
            members = ",".join(client_name(c) for c in sorted(self.tracks[tid]))
            prim = ",".join(client_name(c) for c in self.primaries_of(tid))
            lines.append(f"{tid}: {members} | {prim}")
        if self.fully_excluded:
            lines.append("fully_excluded: " + ",".join(client_name(c) for c in sorted(self.fully_excluded)))
        return "\n".join(lines) + "\n"


def build_exclusion_view(active: Iterable[Disagreement], roster: Iterable[int]) -> ExclusionView:
    excl: defaultdict[int, set[int]] = defaultdict(set)
    full: set[int] = set()
    for d in active:
        t = d.type
        if t is INBOUND:
            excl[d.initiator].add(d.target)
        elif t is OUTBOUND:
            excl[d.target].add(d.initiator)
        elif t is BIDIRECTIONAL:
            excl[d.initiator].add(d.target)
            excl[d.target].add(d.initiator)
        elif t is FULL:
            full.add(d.initiator)
        # partial-data rules only mask local samples
    for c in full:
        excl.pop(c, None)
    return ExclusionView({c: frozenset(s) for c, s in excl.items()}, frozenset(full))


def group_patterns(view: ExclusionView, roster: Iterable[int]) -> dict[tuple[int, ...], tuple[int, ...]]:
    """Group non-withdrawn clients by their sorted exclusion tuple."""
    groups: dict[tuple[int, ...], list[int]] = {}
    full = view.fully_excluded
    emap = view.exclusion_map
    for c in sorted(roster):
        if c in full:
            continue
        excl = emap.get(c)
        pattern = tuple(sorted(excl)) if excl else ()
        groups.setdefault(pattern, []).append(c)
    return {p: tuple(g) for p, g in sorted(groups.items())}


def consolidate(
    tracks: Mapping[Hashable, frozenset[int]], primary: Mapping[int, Hashable]
) -> tuple[dict[str, frozenset[int]], dict[int, str]]:
    """Merge candidate tracks with identical member sets under canonical ids."""
    merged: dict[str, frozenset[int]] = {}
    rename: dict[Hashable, str] = {}
    for key, members in tracks.items():
        tid = track_id(members)
        merged[tid] = members
        rename[key] = tid
    return dict(sorted(merged.items())), {c: rename[k] for c, k in sorted(primary.items())}


def create_tracks(
    pattern_map: Mapping[tuple[int, ...], tuple[int, ...]],
    roster: Iterable[int],
    fully_excluded: frozenset[int] = frozenset(),
) -> TrackPlan:
    base = frozenset(roster) - fully_excluded
    candidates: dict[tuple[int, ...], frozenset[int]] = {}
    primary: dict[int, tuple[int, ...]] = {}
    for pattern, group in pattern_map.items():
        members = base.difference(pattern)
        if not members or not members.issuperset(group):
            names = ",".join(client_name(c) for c in group)
            raise ResolutionError(f"degenerate isolation: pattern excludes its own group ({names})")
        candidates[pattern] = members
        for c in group:
            primary[c] = pattern
    tracks, prim = consolidate(candidates, primary)
    return TrackPlan(tracks, prim, frozenset(fully_excluded))


def resolve(active: Iterable[Disagreement], roster: Iterable[int]) -> TrackPlan:
    roster = frozenset(roster)
    view = build_exclusion_view(active, roster)
    return create_tracks(group_patterns(view, roster), roster, view.fully_excluded)


def naive_resolve(active: Iterable[Disagreement], roster: Iterable[int]) -> dict[int, frozenset[int]]:
    """Per-client aggregation sources of the personalised-model baseline."""
    roster = frozenset(roster)
    view = build_exclusion_view(active, roster)
    base = roster - view.fully_excluded
    empty: frozenset[int] = frozenset()
    return {c: base - view.exclusion_map.get(c, empty) for c in sorted(base)}


def naive_plan(sources: Mapping[int, frozenset[int]], fully_excluded: frozenset[int] = frozenset()) -> TrackPlan:
    """Express naive source sets as a plan: one personalised model per distinct source set."""
    tracks = {track_id(s): s for s in sources.values()}
    primary = {c: track_id(s) for c, s in sources.items()}
    return TrackPlan(dict(sorted(tracks.items())), dict(sorted(primary.items())), frozenset(fully_excluded))


# -- independent oracle -----------------------------------------------------


def _popcount(x: int) -> int:
    return bin(x).count("1")


def oracle_resolve(active: Iterable[Disagreement], roster: Iterable[int]) -> TrackPlan:
    """Brute-force plan derivation over roster bitmasks.

    For every client the oracle scans the disagreement list directly for the
    rules that bind it, then enumerates all subsets of the roster and keeps
    the largest one that contains the client and none of its forbidden
    clients. Distinct maxima become the tracks.
    """
    active = list(active)
    clients = sorted(roster)
    n = len(clients)
    if n > ORACLE_MAX_CLIENTS:
        raise ResolutionError(f"roster too large for the oracle ({n} > {ORACLE_MAX_CLIENTS})")
    bit = {c: 1 << i for i, c in enumerate(clients)}

    withdrawn = 0
    for d in active:
        if d.type is DisagreementType.FULL:
            withdrawn |= bit[d.initiator]

    member_masks: dict[int, int] = {}
    for c in clients:
        if withdrawn & bit[c]:
            continue
        forbidden = withdrawn
        for d in active:
            if d.type is DisagreementType.INBOUND and d.initiator == c:
                forbidden |= bit[d.target]
            elif d.type is DisagreementType.OUTBOUND and d.target == c:
                forbidden |= bit[d.initiator]
            elif d.type is DisagreementType.BIDIRECTIONAL:
                if d.initiator == c:
                    forbidden |= bit[d.target]
                elif d.target == c:
                    forbidden |= bit[d.initiator]
        best, best_size = 0, -1
        for mask in range(1 << n):
            if mask & forbidden or not mask & bit[c]:
                continue
            size = _popcount(mask)
            if size > best_size:
                best, best_size = mask, size
        member_masks[c] = best

    def to_set(mask: int) -> frozenset[int]:
        return frozenset(c for c in clients if mask & bit[c])

    tracks = {}
    primary = {}
    for c, mask in member_masks.items():
        members = to_set(mask)
        tid = track_id(members)
        tracks[tid] = members
        primary[c] = tid
    full = frozenset(c for c in clients if withdrawn & bit[c])
    return TrackPlan(dict(sorted(tracks.items())), primary, full)


def plans_equivalent(a: TrackPlan, b: TrackPlan) -> bool:
    """Same member-set family and same member set behind every primary."""
    return a.family() == b.family() and a.primary_members() == b.primary_members() and a.fully_excluded == b.fully_excluded
