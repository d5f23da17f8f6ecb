"""Round loop: Analyse, Train, Aggregate, Evaluate.

The engine keeps one model lineage per track, trains every client once per
track it belongs to (background participation), aggregates strictly by
track, and rebuilds track history when a deep exclusion becomes active.
Each derived model records a :class:`~fedtrack.provenance.LineageNode` so
the provenance checkers can replay influence independently.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import learner
from .data import Dataset, build_dataset
from .metrics import PHASES, PhaseTimer
from .policy import (
    Depth,
    Disagreement,
    DisagreementType,
    Resolver,
    RewindMode,
    ScenarioConfig,
    active_disagreements,
    client_name,
)
from .provenance import EMPTY, INIT_NODE, InfluenceSet, LineageNode
from .resolution import TrackPlan, naive_plan, naive_resolve, resolve

log = logging.getLogger(__name__)

THREADS_ENV = "FEDTRACK_THREADS"


class EngineError(RuntimeError):
    pass


class RewindError(EngineError):
    pass


@dataclass(frozen=True)
class LineageStep:
    """One historical aggregation a model descends from; ``dropped`` lists
    clients whose updates a rewind removed from that aggregation."""

    round: int
    track: str
    dropped: frozenset[int] = frozenset()


@dataclass(frozen=True, eq=False)
class ModelState:
    weights: np.ndarray
    round: int
    track: str
    influence: InfluenceSet
    ref: str
    lineage: tuple[LineageStep, ...] = ()


@dataclass(frozen=True, eq=False)
class Update:
    client: int
    track: str
    round: int
    base_ref: str
    ref: str
    samples: int
    model: ModelState | None


@dataclass
class TrackRound:
    start: ModelState
    aggregate: ModelState
    updates: dict[int, Update]


@dataclass
class Track:
    id: str
    members: frozenset[int]
    created_round: int
    dissolved_round: int | None = None
    history: dict[int, TrackRound] = field(default_factory=dict)

    @property
    def current(self) -> ModelState:
        return self.history[max(self.history)].aggregate


@dataclass(frozen=True)
class TrackMetrics:
    loss: float
    metric: float
    members: tuple[int, ...]
    background_updates: int


@dataclass(frozen=True)
class UpdateRecord:
    client: int
    track: str
    round: int
    base_ref: str
    ref: str
    samples: int


@dataclass(frozen=True)
class RewindRecord:
    round: int
    track: str
    excluded: frozenset[int]
    mode: str
    rebuilt_rounds: tuple[int, ...]


@dataclass
class RoundRecord:
    round: int
    plan: TrackPlan
    timings: dict[str, int]
    metrics: dict[str, TrackMetrics]
    background: int
    updates: tuple[UpdateRecord, ...]
    aggregated: dict[str, tuple[str, ...]]
    track_start: dict[str, str]
    track_aggregate: dict[str, str]
    delivered: dict[int, str]
    lineage: tuple[LineageNode, ...]
    influence: dict[str, InfluenceSet]
    created: tuple[str, ...] = ()
    dissolved: tuple[str, ...] = ()
    rewinds: tuple[RewindRecord, ...] = ()
    models: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_count(self) -> int:
        """Aggregates plus submitted local updates produced this round."""
        return len(self.plan.tracks) + len(self.updates)

    def fingerprint(self) -> tuple:
        """Everything except wall-clock timings, for determinism checks."""
        return (
            self.round,
            self.plan.dump(),
            tuple(sorted((t, m) for t, m in self.metrics.items())),
            self.background,
            self.updates,
            tuple(sorted(self.aggregated.items())),
            tuple(sorted(self.track_start.items())),
            tuple(sorted(self.delivered.items())),
            self.lineage,
            tuple(sorted((t, w.tobytes()) for t, w in self.models.items())),
        )


# -- pure building blocks ---------------------------------------------------


def derive_seed(*parts: object) -> int:
    key = "|".join(map(str, parts)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def training_seed(master: int, client: int, round: int, track: str) -> int:
    return derive_seed(master, client, round, track)


def weighted_mean(vectors: Sequence[np.ndarray], counts: Sequence[int]) -> np.ndarray:
    """Sample-weighted average, expressed relative to the first vector so
    that identical inputs come back bit-for-bit unchanged."""
    ref = vectors[0]
    acc = np.zeros_like(ref)
    for v, n in zip(vectors, counts):
        acc += n * (v - ref)
    total = float(sum(counts))
    return np.where(acc == 0.0, ref, ref + acc / total)


def local_train(
    client: int,
    base: ModelState,
    track: str,
    round: int,
    data_view: tuple[np.ndarray, np.ndarray],
    *,
    spec,
    task: str,
    classes: int,
    seed: int,
    ref: str | None = None,
) -> Update | None:
    """Train ``base`` on one client's data for one track.

    Returns ``None`` when nothing is submitted (zero epochs or no samples
    left after masking). The result depends only on the arguments.
    """
    X, y = data_view
    if spec.epochs == 0 or len(y) == 0:
        if len(y) == 0:
            log.info("round %d: %s has no samples for %s, no update", round, client_name(client), track)
        return None
    rng = np.random.default_rng(training_seed(seed, client, round, track))
    w = learner.sgd(
        base.weights,
        X,
        y,
        task=task,
        classes=classes,
        epochs=spec.epochs,
        learning_rate=spec.learning_rate,
        batch_size=spec.batch_size,
        rng=rng,
    )
    if not np.all(np.isfinite(w)):
        raise EngineError(f"training diverged: non-finite parameters in round {round}, track {track}, client {client_name(client)}")
    ref = ref or f"r{round}/{track}/upd/{client_name(client)}"
    model = ModelState(w, round, track, base.influence.with_pair(client, round), ref, base.lineage)
    return Update(client, track, round, base.ref, ref, len(y), model)


def aggregate_track(
    track: str,
    round: int,
    start: ModelState,
    updates: Iterable[Update],
    *,
    enforce_fairness: bool = True,
) -> ModelState:
    """FedAvg over one track's updates; carries ``start`` over if there are none."""
    ups = sorted(updates, key=lambda u: u.client)
    if enforce_fairness:
        for u in ups:
            if u.base_ref != start.ref:
                raise EngineError(
                    f"fairness precondition violated in round {round}: update from {client_name(u.client)} "
                    f"for {track} was trained from {u.base_ref}, not {start.ref}"
                )
    ref = f"r{round}/{track}/agg"
    lineage = start.lineage + (LineageStep(round, track),)
    if not ups:
        log.info("round %d: %s received no updates, carrying model over", round, track)
        return ModelState(start.weights, round, track, start.influence, ref, lineage)
    w = weighted_mean([u.model.weights for u in ups], [u.samples for u in ups])
    if not np.all(np.isfinite(w)):
        raise EngineError(f"non-finite aggregate in round {round}, track {track}")
    infl = ups[0].model.influence.union(*(u.model.influence for u in ups[1:]))
    return ModelState(w, round, track, infl, ref, lineage)


def _inbound_pairs(d: Disagreement, client_count: int) -> list[tuple[int, int]]:
    """``(receiver, excluded)`` pairs a disagreement imposes."""
    t = d.type
    if t is DisagreementType.INBOUND:
        return [(d.initiator, d.target)]
    if t is DisagreementType.OUTBOUND:
        return [(d.target, d.initiator)]
    if t is DisagreementType.BIDIRECTIONAL:
        return [(d.initiator, d.target), (d.target, d.initiator)]
    if t is DisagreementType.FULL:
        return [(o, d.initiator) for o in range(client_count) if o != d.initiator]
    return []


# -- simulation -------------------------------------------------------------


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise EngineError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


class Simulation:
    def __init__(
        self,
        config: ScenarioConfig,
        *,
        dataset: Dataset | None = None,
        threads: int | None = None,
        retain_locals: bool | None = None,
    ):
        self.config = config
        self.robust = config.resolver is Resolver.ROBUST
        self.dataset = dataset if dataset is not None else build_dataset(config.dataset, config.client_count, config.seed)
        self.task = self.dataset.task
        self.classes = self.dataset.classes
        self.threads = threads or default_threads()
        self.retain = config.has_deep if retain_locals is None else retain_locals
        rng = np.random.default_rng(derive_seed(config.seed, "init"))
        w0 = learner.init_weights(self.task, self.dataset.dims, self.classes, rng)
        self.init_model = ModelState(w0, -1, "init", EMPTY, INIT_NODE.ref)
        self.live: dict[str, Track] = {}
        self.archive: list[Track] = []
        self.history: dict[tuple[int, str], TrackRound] = {}
        self.plan: TrackPlan | None = None
        self.records: list[RoundRecord] = []
        self._eval_cache: dict[frozenset[int], tuple[np.ndarray, np.ndarray]] = {}

    # data

    def data_mask(self, client: int, round: int) -> float | None:
        masks = [
            d.data_mask
            for d in self.config.disagreements
            if d.type is DisagreementType.PARTIAL_DATA and d.initiator == client and d.active_at(round)
        ]
        return max(masks) if masks else None

    def train_view(self, client: int, round: int) -> tuple[np.ndarray, np.ndarray]:
        return self.dataset.train_view(client, self.data_mask(client, round))

    def _eval_data(self, members: frozenset[int]) -> tuple[np.ndarray, np.ndarray]:
        got = self._eval_cache.get(members)
        if got is None:
            views = [self.dataset.eval_view(c) for c in sorted(members)]
            got = (np.concatenate([v[0] for v in views]), np.concatenate([v[1] for v in views]))
            self._eval_cache[members] = got
        return got

    def _train(self, client: int, base: ModelState, track: str, round: int, ref: str | None = None) -> Update | None:
        return local_train(
            client,
            base,
            track,
            round,
            self.train_view(client, round),
            spec=self.config.learner,
            task=self.task,
            classes=self.classes,
            seed=self.config.seed,
            ref=ref,
        )

    # analyse helpers

    def _forbidden(self, active: Sequence[Disagreement]) -> dict[int, dict[int, tuple[int, bool]]]:
        """receiver -> excluded -> (earliest forbidden round, deep?)."""
        strict = self.config.rewind_mode is RewindMode.RETRAIN
        out: dict[int, dict[int, tuple[int, bool]]] = {}
        for d in active:
            deep = d.depth is Depth.DEEP
            cutoff = -1 if (deep and strict) else d.start_round
            for a, b in _inbound_pairs(d, self.config.client_count):
                prev = out.setdefault(a, {}).get(b)
                if prev is not None:
                    cutoff, deep = min(prev[0], cutoff), prev[1] or deep
                out[a][b] = (cutoff, deep)
        return out

    def _newly_deep(self, active: Sequence[Disagreement], round: int) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for d in active:
            if d.depth is Depth.DEEP and d.start_round == round:
                for a, b in _inbound_pairs(d, self.config.client_count):
                    out.setdefault(a, set()).add(b)
        return out

    @staticmethod
    def _offending(model: ModelState, members: frozenset[int], forbidden, deep_only: bool = False) -> set[int]:
        bad = set()
        for a in members:
            for b, (cutoff, deep) in forbidden.get(a, {}).items():
                if b in members or (deep_only and not deep):
                    continue
                if model.influence.has_from(b, cutoff):
                    bad.add(b)
        return bad

    def _seed_candidates(self, tid: str, plan: TrackPlan, round: int) -> list[ModelState]:
        """Previous models of the new track's primary clients, by plurality
        then track id; the common initialisation comes last."""
        counts: dict[str, int] = {}
        if self.plan is not None:
            for c in plan.primaries_of(tid):
                prev = self.plan.primary.get(c)
                if prev is not None:
                    counts[prev] = counts.get(prev, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return [self.history[(round - 1, t)].aggregate for t in ranked] + [self.init_model]

    def rewind_deep(
        self, source: ModelState, excluded: frozenset[int], target: str, round: int
    ) -> tuple[ModelState, list[LineageNode], RewindRecord | None]:
        """Rebuild ``source`` without the direct contributions of ``excluded``.

        Re-aggregation replays the stored local models of every historical
        aggregation the model descends from, minus the excluded clients,
        carrying forward the difference between the rebuilt chain and the
        original one. Retraining replays the same rounds from the common
        initialisation, re-running local training for the surviving
        contributors under ``target``'s training seeds.
        """
        steps = source.lineage
        touched = False
        for s in steps:
            tr = self.history[(s.round, s.track)]
            if any(c in excluded and c not in s.dropped for c in tr.updates):
                touched = True
                break
        if not touched:
            return source, [], None

        mode = self.config.rewind_mode
        nodes: list[LineageNode] = []
        rebuilt = self.init_model
        new_steps = []
        for s in steps:
            tr = self.history[(s.round, s.track)]
            drop = s.dropped | excluded
            kept = [u for c, u in sorted(tr.updates.items()) if c not in drop]
            ref = f"r{round}/{target}/rewind/r{s.round}"
            if mode is RewindMode.REAGGREGATE:
                if any(u.model is None for u in kept):
                    raise RewindError("retention required for deep exclusion: local models of "
                                      f"round {s.round} ({s.track}) were not kept")
                if kept:
                    mean = weighted_mean([u.model.weights for u in kept], [u.samples for u in kept])
                    drift = rebuilt.weights - tr.start.weights
                    w = mean + drift if drift.any() else mean
                    infl = rebuilt.influence.union(*(u.model.influence for u in kept))
                    parents = (rebuilt.ref, *(u.ref for u in kept))
                else:
                    w, infl, parents = rebuilt.weights, rebuilt.influence, (rebuilt.ref,)
            else:
                ups = []
                for u in kept:
                    nu = self._train(u.client, rebuilt, target, s.round, ref=f"{ref}/upd/{client_name(u.client)}")
                    if nu is None:
                        continue
                    ups.append(nu)
                    nodes.append(LineageNode(nu.ref, "rewind-update", s.round, target, (rebuilt.ref,), (u.client, s.round)))
                if ups:
                    w = weighted_mean([u.model.weights for u in ups], [u.samples for u in ups])
                    infl = ups[0].model.influence.union(*(u.model.influence for u in ups[1:]))
                    parents = tuple(u.ref for u in ups)
                else:
                    w, infl, parents = rebuilt.weights, rebuilt.influence, (rebuilt.ref,)
            nodes.append(LineageNode(ref, "rewind-aggregate", s.round, target, parents, excluded=frozenset(drop)))
            new_steps.append(LineageStep(s.round, s.track, frozenset(drop)))
            rebuilt = ModelState(w, s.round, target, infl, ref, tuple(new_steps))

        final = ModelState(rebuilt.weights, round, target, rebuilt.influence, f"r{round}/{target}/rewind", tuple(new_steps))
        nodes.append(LineageNode(final.ref, "rewind", round, target, (rebuilt.ref,), excluded=frozenset(excluded)))
        record = RewindRecord(round, target, frozenset(excluded), mode.value, tuple(s.round for s in steps))
        log.info("round %d: rewound %s excluding %s (%s)", round, target, sorted(map(client_name, excluded)), mode.value)
        return final, nodes, record

    def _analyse(self, plan: TrackPlan, active: Sequence[Disagreement], round: int):
        created = tuple(t for t in plan.tracks if t not in self.live)
        dissolved = tuple(t for t in sorted(self.live) if t not in plan.tracks)
        for tid in dissolved:
            track = self.live.pop(tid)
            track.dissolved_round = round
            self.archive.append(track)

        forbidden = self._forbidden(active) if self.robust else {}
        newly_deep = self._newly_deep(active, round) if self.robust else {}
        nodes: list[LineageNode] = []
        rewinds: list[RewindRecord] = []
        starts: dict[str, ModelState] = {}

        for tid, members in plan.tracks.items():
            is_new = tid not in self.live
            candidates = self._seed_candidates(tid, plan, round) if is_new else [self.live[tid].current]
            chosen = None
            for cand in candidates:
                model, extra, rw = cand, [], None
                if self.robust:
                    targets = set()
                    for a in plan.primaries_of(tid):
                        targets |= newly_deep.get(a, set())
                    targets |= self._offending(model, members, forbidden, deep_only=True)
                    targets -= members
                    if targets:
                        model, extra, rw = self.rewind_deep(model, frozenset(targets), tid, round)
                    if self._offending(model, members, forbidden):
                        continue
                chosen = model
                nodes.extend(extra)
                if rw is not None:
                    rewinds.append(rw)
                break
            if chosen is None:
                raise EngineError(f"round {round}: no isolation-safe start model for existing track {tid}")
            if is_new:
                if chosen is self.init_model and round > 0:
                    log.info("round %d: %s starts cold from the common initialisation", round, tid)
                ref = f"r{round}/{tid}/seed"
                nodes.append(LineageNode(ref, "seed", round, tid, (chosen.ref,)))
                chosen = ModelState(chosen.weights, round, tid, chosen.influence, ref, chosen.lineage)
                self.live[tid] = Track(tid, members, round)
            starts[tid] = chosen
        return starts, nodes, rewinds, created, dissolved

    # round loop

    def _run_tasks(self, tasks: list[tuple[int, str]], starts: dict[str, ModelState], round: int) -> list[Update | None]:
        def job(task: tuple[int, str]) -> Update | None:
            client, tid = task
            return self._train(client, starts[tid], tid, round)

        if self.threads > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(job, tasks))
        return [job(t) for t in tasks]

    def step(self, round: int) -> RoundRecord:
        cfg = self.config
        timer = PhaseTimer()
        with timer.phase("analyse"):
            active = active_disagreements(cfg, round)
            if self.robust:
                plan = resolve(active, cfg.roster)
            else:
                sources = naive_resolve(active, cfg.roster)
                plan = naive_plan(sources, cfg.roster - frozenset(sources))
            starts, nodes, rewinds, created, dissolved = self._analyse(plan, active, round)

        with timer.phase("train"):
            if self.robust:
                tasks = [(c, tid) for tid in plan.tracks for c in sorted(plan.tracks[tid])]
            else:
                tasks = [(c, plan.primary[c]) for c in sorted(plan.primary)]
            results = [u for u in self._run_tasks(tasks, starts, round) if u is not None]

        with timer.phase("aggregate"):
            aggregates: dict[str, ModelState] = {}
            aggregated: dict[str, tuple[str, ...]] = {}
            for tid, members in plan.tracks.items():
                if self.robust:
                    ups = [u for u in results if u.track == tid]
                else:
                    ups = [u for u in results if u.client in members]
                agg = aggregate_track(tid, round, starts[tid], ups, enforce_fairness=self.robust)
                aggregates[tid] = agg
                aggregated[tid] = tuple(u.ref for u in ups)
                kept = {u.client: (u if self.retain else replace(u, model=None)) for u in ups}
                tr = TrackRound(starts[tid], agg, kept)
                self.history[(round, tid)] = tr
                self.live[tid].history[round] = tr
                for u in ups:
                    nodes.append(LineageNode(u.ref, "update", round, u.track, (u.base_ref,), (u.client, round)))
                parents = tuple(u.ref for u in ups) or (starts[tid].ref,)
                nodes.append(LineageNode(agg.ref, "aggregate", round, tid, parents))

        with timer.phase("evaluate"):
            metrics = {}
            background = 0
            for tid, members in plan.tracks.items():
                bg = sum(1 for u in results if u.track == tid and plan.primary.get(u.client) != tid)
                background += bg
                X, y = self._eval_data(members)
                loss, metric = learner.evaluate(aggregates[tid].weights, X, y, task=self.task, classes=self.classes)
                metrics[tid] = TrackMetrics(loss, metric, tuple(sorted(members)), bg)

        # dedupe nodes: an update feeding several naive models is logged once
        seen: set[str] = set()
        lineage = []
        for n in nodes:
            if n.ref not in seen:
                seen.add(n.ref)
                lineage.append(n)

        record = RoundRecord(
            round=round,
            plan=plan,
            timings={p: timer.durations.get(p, 0) for p in PHASES},
            metrics=metrics,
            background=background,
            updates=tuple(UpdateRecord(u.client, u.track, round, u.base_ref, u.ref, u.samples) for u in results),
            aggregated=aggregated,
            track_start={tid: m.ref for tid, m in starts.items()},
            track_aggregate={tid: m.ref for tid, m in aggregates.items()},
            delivered={c: aggregates[tid].ref for c, tid in plan.primary.items()},
            lineage=tuple(lineage),
            influence={tid: m.influence for tid, m in aggregates.items()},
            created=created,
            dissolved=dissolved,
            rewinds=tuple(rewinds),
            models={tid: m.weights for tid, m in aggregates.items()},
        )
        self._last_updates = results
        self.plan = plan
        self.records.append(record)
        return record

    def run(self, out_dir: str | Path | None = None, *, persist_models: bool = False) -> list[RoundRecord]:
        writer = None
        if out_dir is not None:
            from .rundir import RunWriter

            writer = RunWriter(out_dir, self.config, persist_models=persist_models)
        for r in range(self.config.rounds):
            rec = self.step(r)
            if writer is not None:
                writer.write_round(rec, self._last_updates)
        if writer is not None:
            writer.finish(self.records)
        return self.records

    def tracks(self) -> list[Track]:
        """Every track ever created, live ones last."""
        return self.archive + list(self.live.values())


def run_scenario(
    config: ScenarioConfig,
    *,
    out_dir: str | Path | None = None,
    persist_models: bool = False,
    threads: int | None = None,
    dataset: Dataset | None = None,
) -> list[RoundRecord]:
    return Simulation(config, dataset=dataset, threads=threads).run(out_dir, persist_models=persist_models)
