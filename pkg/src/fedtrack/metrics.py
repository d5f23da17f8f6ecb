"""Phase timing, scalability sweeps and track timelines."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .policy import (
    Disagreement,
    DisagreementType,
    ScenarioConfig,
    client_name,
    load_scenario,
    scenario_from_dict,
    validate_scenario,
)

if TYPE_CHECKING:
    from .engine import RoundRecord

PHASES = ("analyse", "train", "aggregate", "evaluate")


class PhaseTimer:
    """Monotonic nanosecond wall time per named phase."""

    def __init__(self) -> None:
        self.durations: dict[str, int] = {}
        self._t0 = time.perf_counter_ns()
        self.total = 0

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.durations[name] = self.durations.get(name, 0) + time.perf_counter_ns() - start
            self.total = time.perf_counter_ns() - self._t0


def time_phases(fn, *args, **kwargs) -> tuple[object, dict[str, int]]:
    """Run ``fn(timer, *args, **kwargs)`` and return its result with the phase durations."""
    timer = PhaseTimer()
    result = fn(timer, *args, **kwargs)
    return result, dict(timer.durations)


# -- scalability sweeps -----------------------------------------------------


class SweepError(ValueError):
    pass


class Dimension(str, Enum):
    TOTAL_CLIENTS = "total_clients"
    DISAGREEING_CLIENTS = "disagreeing_clients"
    DENSITY = "density"
    # all three grow together: n clients, ceil(n/2) disagreeing, ceil(n/10) exclusions each
    COMBINED = "combined"


@dataclass(frozen=True)
class SweepSpec:
    """A one-dimensional scaling experiment around ``base``.

    ``TOTAL_CLIENTS`` keeps the base disagreements and grows the roster.
    The other dimensions replace the base disagreements with a generated
    structure in which each of the first ``k`` clients inbound-excludes the
    ``d`` clients that follow it (cyclically), giving every disagreeing
    client its own exclusion pattern.
    """

    dimension: Dimension
    grid: tuple[int, ...]
    base: ScenarioConfig
    repetitions: int = 5
    disagreeing: int | None = None
    density: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimension", Dimension(self.dimension))
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        if not self.grid:
            raise SweepError("grid is empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise SweepError(f"grid must be strictly increasing, got {list(self.grid)}")
        if self.grid[0] < 1:
            raise SweepError("grid values must be positive")
        if self.repetitions < 1:
            raise SweepError("repetitions must be at least 1")
        if self.density < 1:
            raise SweepError("density must be at least 1")


def generated_disagreements(clients: int, disagreeing: int, density: int) -> list[Disagreement]:
    k = min(disagreeing, clients)
    d = min(density, clients - 1)
    return [
        Disagreement(DisagreementType.INBOUND, i, (i + 1 + j) % clients)
        for i in range(k)
        for j in range(d)
    ]


def sweep_scenario(spec: SweepSpec, value: int, seed: int | None = None) -> ScenarioConfig:
    base = spec.base
    n = base.client_count
    if spec.dimension is Dimension.TOTAL_CLIENTS:
        n, ds = value, list(base.disagreements)
    elif spec.dimension is Dimension.DISAGREEING_CLIENTS:
        ds = generated_disagreements(n, value, spec.density)
    elif spec.dimension is Dimension.DENSITY:
        k = spec.disagreeing if spec.disagreeing is not None else max(1, n // 2)
        ds = generated_disagreements(n, k, value)
    else:
        n = value
        ds = generated_disagreements(n, math.ceil(n / 2), math.ceil(n / 10))
    config = replace(
        base,
        client_count=n,
        disagreements=tuple(ds),
        seed=base.seed if seed is None else seed,
        name=f"{base.name}-{spec.dimension.value}-{value}",
    )
    errors = validate_scenario(config)
    if errors:
        raise SweepError(f"{spec.dimension.value}={value}: " + "; ".join(errors))
    return config


@dataclass(frozen=True)
class Repetition:
    seed: int
    phases: dict[str, int]  # summed over rounds
    final_metrics: dict[str, tuple[float, float]]
    model_count: int

    @property
    def total(self) -> int:
        return sum(self.phases.values())


@dataclass(frozen=True)
class SweepPoint:
    value: int
    repetitions: tuple[Repetition, ...]

    def mean(self, phase: str = "total") -> float:
        return float(np.mean(self._series(phase)))

    def std(self, phase: str = "total") -> float:
        return float(np.std(self._series(phase)))

    def _series(self, phase: str) -> list[int]:
        if phase == "total":
            return [r.total for r in self.repetitions]
        return [r.phases.get(phase, 0) for r in self.repetitions]


@dataclass(frozen=True)
class SweepReport:
    spec: SweepSpec
    points: tuple[SweepPoint, ...]

    def exponent(self, phase: str = "total") -> float:
        return fit_exponent([p.value for p in self.points], [p.mean(phase) for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(PHASES) + ["total"]
        w.writerow(["value"] + [f"{c}_{s}" for c in cols for s in ("mean_ns", "std_ns")])
        for p in self.points:
            w.writerow([p.value] + [f"{x:.1f}" for c in cols for x in (p.mean(c), p.std(c))])
        return buf.getvalue()


def repetition_seed(master: int, value: int, rep: int) -> int:
    h = hashlib.blake2b(f"sweep|{master}|{value}|{rep}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & 0x7FFF_FFFF_FFFF_FFFF


def _run_one(config: ScenarioConfig) -> Repetition:
    from .engine import run_scenario

    records = run_scenario(config, threads=1)
    phases = {p: sum(r.timings.get(p, 0) for r in records) for p in PHASES}
    last = records[-1]
    final = {t: (m.loss, m.metric) for t, m in sorted(last.metrics.items())}
    return Repetition(config.seed, phases, final, sum(r.model_count for r in records))


def run_sweep(spec: SweepSpec, *, parallel: bool = False, workers: int | None = None) -> SweepReport:
    jobs = [
        (value, sweep_scenario(spec, value, repetition_seed(spec.base.seed, value, rep)))
        for value in spec.grid
        for rep in range(spec.repetitions)
    ]
    if parallel:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, [c for _, c in jobs]))
    else:
        results = [_run_one(c) for _, c in jobs]
    points = []
    for value in spec.grid:
        reps = tuple(r for (v, _), r in zip(jobs, results) if v == value)
        points.append(SweepPoint(value, reps))
    return SweepReport(spec, tuple(points))


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    x = np.log(np.asarray(xs, dtype=float))
    y = np.log(np.asarray(ys, dtype=float))
    if len(x) < 2:
        raise SweepError("need at least two points to fit an exponent")
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def load_sweep(path: str | Path) -> SweepSpec:
    """Read a sweep file; ``base`` is an inline scenario or a path relative to the file."""
    path = Path(path)
    raw = json.loads(path.read_text())
    base = raw.get("base")
    if isinstance(base, str):
        config = load_scenario(path.parent / base)
    elif isinstance(base, dict):
        config = scenario_from_dict(base)
    else:
        raise SweepError(f"{path}: 'base' must be a scenario object or a path")
    try:
        return SweepSpec(
            dimension=Dimension(raw["dimension"]),
            grid=tuple(raw["grid"]),
            base=config,
            repetitions=int(raw.get("repetitions", 5)),
            disagreeing=raw.get("disagreeing"),
            density=int(raw.get("density", 1)),
        )
    except KeyError as e:
        raise SweepError(f"{path}: missing field {e.args[0]!r}") from None
    except ValueError as e:
        raise SweepError(f"{path}: {e}") from None


# -- timelines --------------------------------------------------------------


def timeline_rows(records: Sequence[RoundRecord]) -> list[tuple[int, str, tuple[int, ...]]]:
    """(round, track, contributing clients) for every live track of every round."""
    rows = []
    for rec in records:
        by_ref = {u.ref: u.client for u in rec.updates}
        for tid in sorted(rec.plan.tracks):
            contributors = tuple(sorted(by_ref[ref] for ref in rec.aggregated.get(tid, ()) if ref in by_ref))
            rows.append((rec.round, tid, contributors))
    return rows


def _spans(rounds: list[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for r in sorted(rounds):
        if out and out[-1][1] == r:
            out[-1] = (out[-1][0], r + 1)
        else:
            out.append((r, r + 1))
    return out


def emit_timeline(records: Sequence[RoundRecord]) -> tuple[str, str]:
    """Render the track-contribution timeline as (csv text, svg text)."""
    rows = timeline_rows(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "track", "contributors"])
    for r, tid, cs in rows:
        w.writerow([r, tid, ";".join(client_name(c) for c in cs)])

    lifetimes: dict[str, list[int]] = {}
    members: dict[str, frozenset[int]] = {}
    for rec in records:
        for tid, m in rec.plan.tracks.items():
            lifetimes.setdefault(tid, []).append(rec.round)
            members[tid] = m
    order = sorted(lifetimes, key=lambda t: (min(lifetimes[t]), t))
    rounds = len(records)
    cell, label_w, row_h, top = 24, 220, 26, 30
    width = label_w + cell * max(rounds, 1) + 20
    height = top + row_h * len(order) + 20

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r in range(rounds):
        x = label_w + r * cell
        parts.append(f'<text x="{x + cell / 2}" y="{top - 10}" text-anchor="middle">{r}</text>')
    for i, tid in enumerate(order):
        y = top + i * row_h
        label = escape(f"{tid} {{{','.join(client_name(c) for c in sorted(members[tid]))}}}")
        parts.append(f'<text x="4" y="{y + row_h / 2 + 4}">{label}</text>')
        hue = (i * 67) % 360
        for lo, hi in _spans(lifetimes[tid]):
            x0, x1 = label_w + lo * cell, label_w + hi * cell
            parts.append(
                f'<rect class="bar" data-track="{tid}" data-start="{lo}" data-end="{hi}" x="{x0}" y="{y + 4}" '
                f'width="{x1 - x0}" height="{row_h - 8}" fill="hsl({hue},60%,65%)" stroke="#333"/>'
            )
            if lo > 0:
                parts.append(
                    f'<path class="created" d="M{x0} {y + 2} l5 -0 l-5 {row_h - 4} z" fill="#080"/>'
                )
            if hi < rounds:
                parts.append(
                    f'<path class="dissolved" d="M{x1} {y + 2} l-5 0 l5 {row_h - 4} z" fill="#a00"/>'
                )
    parts.append("</svg>")
    return buf.getvalue(), "\n".join(parts) + "\n"


def summarize(records: Sequence[RoundRecord]) -> str:
    lines = [f"rounds: {len(records)}"]
    if not records:
        return "\n".join(lines) + "\n"
    seen: dict[str, list[int]] = {}
    for rec in records:
        for tid in rec.plan.tracks:
            seen.setdefault(tid, []).append(rec.round)
    lines.append(f"tracks ever live: {len(seen)}")
    lines.append(f"models produced: {sum(r.model_count for r in records)}")
    lines.append(f"background updates: {sum(r.background for r in records)}")
    lines.append(f"rewinds: {sum(len(r.rewinds) for r in records)}")
    last = records[-1]
    for tid in sorted(seen, key=lambda t: (min(seen[t]), t)):
        spans = ", ".join(f"{lo}-{hi - 1}" for lo, hi in _spans(seen[tid]))
        line = f"  {tid} rounds {spans}"
        if tid in last.metrics:
            m = last.metrics[tid]
            line += f" final loss {m.loss:.4f} metric {m.metric:.4f} members {','.join(client_name(c) for c in m.members)}"
        lines.append(line)
    return "\n".join(lines) + "\n"
