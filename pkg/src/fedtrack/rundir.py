"""Run directory layout.

::

    scenario.json                         effective configuration
    records.jsonl                         one lineage/plan record per round
    metrics.csv, timings.csv
    rounds/<r>/plan.txt                   resolver dump
    rounds/<r>/tracks/<id>/model.bin      aggregated model   (--persist-models)
    rounds/<r>/tracks/<id>/updates/<C>.bin local update       (--persist-models)

Model files are a little-endian uint32 length followed by float64 values.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import RewindRecord, RoundRecord, TrackMetrics, Update, UpdateRecord
from .metrics import PHASES
from .policy import ScenarioConfig, client_name, load_scenario, save_scenario
from .provenance import InfluenceSet, LineageNode
from .resolution import TrackPlan

METRICS_COLUMNS = ["round", "track", "loss", "metric", "members", "background_updates"]
TIMINGS_COLUMNS = ["round", "phase", "nanos"]


def write_model(path: Path, weights: np.ndarray) -> None:
    w = np.ascontiguousarray(weights, dtype="<f8")
    path.write_bytes(struct.pack("<I", len(w)) + w.tobytes())


def read_model(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n,) = struct.unpack("<I", buf[:4])
    if len(buf) != 4 + 8 * n:
        raise ValueError(f"{path}: expected {n} float64 values, file has {len(buf) - 4} payload bytes")
    return np.frombuffer(buf, dtype="<f8", offset=4, count=n).astype(np.float64)


def _names(clients) -> str:
    return ";".join(client_name(c) for c in sorted(clients))


def record_to_json(rec: RoundRecord) -> dict:
    return {
        "round": rec.round,
        "plan": {
            "tracks": {t: sorted(m) for t, m in rec.plan.tracks.items()},
            "primary": {str(c): t for c, t in rec.plan.primary.items()},
            "fully_excluded": sorted(rec.plan.fully_excluded),
        },
        "timings": rec.timings,
        "metrics": {t: [m.loss, m.metric, list(m.members), m.background_updates] for t, m in rec.metrics.items()},
        "background": rec.background,
        "updates": [[u.client, u.track, u.round, u.base_ref, u.ref, u.samples] for u in rec.updates],
        "aggregated": {t: list(refs) for t, refs in rec.aggregated.items()},
        "track_start": rec.track_start,
        "track_aggregate": rec.track_aggregate,
        "delivered": {str(c): ref for c, ref in rec.delivered.items()},
        "lineage": [n.to_json() for n in rec.lineage],
        "influence": {t: {str(c): [list(iv) for iv in ivs] for c, ivs in s.intervals().items()} for t, s in rec.influence.items()},
        "created": list(rec.created),
        "dissolved": list(rec.dissolved),
        "rewinds": [[w.round, w.track, sorted(w.excluded), w.mode, list(w.rebuilt_rounds)] for w in rec.rewinds],
    }


def record_from_json(raw: dict) -> RoundRecord:
    p = raw["plan"]
    plan = TrackPlan(
        {t: frozenset(m) for t, m in p["tracks"].items()},
        {int(c): t for c, t in p["primary"].items()},
        frozenset(p["fully_excluded"]),
    )
    return RoundRecord(
        round=raw["round"],
        plan=plan,
        timings=dict(raw["timings"]),
        metrics={t: TrackMetrics(v[0], v[1], tuple(v[2]), v[3]) for t, v in raw["metrics"].items()},
        background=raw["background"],
        updates=tuple(UpdateRecord(*u) for u in raw["updates"]),
        aggregated={t: tuple(r) for t, r in raw["aggregated"].items()},
        track_start=dict(raw["track_start"]),
        track_aggregate=dict(raw["track_aggregate"]),
        delivered={int(c): r for c, r in raw["delivered"].items()},
        lineage=tuple(LineageNode.from_json(n) for n in raw["lineage"]),
        influence={t: InfluenceSet.from_intervals({int(c): ivs for c, ivs in s.items()}) for t, s in raw["influence"].items()},
        created=tuple(raw["created"]),
        dissolved=tuple(raw["dissolved"]),
        rewinds=tuple(RewindRecord(w[0], w[1], frozenset(w[2]), w[3], tuple(w[4])) for w in raw["rewinds"]),
    )


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for rec in records:
        for tid in sorted(rec.metrics):
            m = rec.metrics[tid]
            w.writerow([rec.round, tid, repr(m.loss), repr(m.metric), _names(m.members), m.background_updates])
    return buf.getvalue()


def timings_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMINGS_COLUMNS)
    for rec in records:
        for phase in PHASES:
            w.writerow([rec.round, phase, rec.timings.get(phase, 0)])
    return buf.getvalue()


class RunWriter:
    def __init__(self, out_dir: str | Path, config: ScenarioConfig, *, persist_models: bool = False):
        self.root = Path(out_dir)
        self.persist = persist_models
        self.root.mkdir(parents=True, exist_ok=True)
        save_scenario(config, self.root / "scenario.json")
        self._records = open(self.root / "records.jsonl", "w")

    def write_round(self, rec: RoundRecord, updates: Sequence[Update]) -> None:
        rdir = self.root / "rounds" / str(rec.round)
        rdir.mkdir(parents=True, exist_ok=True)
        (rdir / "plan.txt").write_text(rec.plan.dump())
        if self.persist:
            for tid, weights in rec.models.items():
                tdir = rdir / "tracks" / tid
                tdir.mkdir(parents=True, exist_ok=True)
                write_model(tdir / "model.bin", weights)
            for u in updates:
                udir = rdir / "tracks" / u.track / "updates"
                udir.mkdir(parents=True, exist_ok=True)
                write_model(udir / f"{client_name(u.client)}.bin", u.model.weights)
        self._records.write(json.dumps(record_to_json(rec), sort_keys=True) + "\n")

    def finish(self, records: Sequence[RoundRecord]) -> None:
        self._records.close()
        (self.root / "metrics.csv").write_text(metrics_csv(records))
        (self.root / "timings.csv").write_text(timings_csv(records))


def load_run(run_dir: str | Path) -> tuple[ScenarioConfig, list[RoundRecord]]:
    root = Path(run_dir)
    if not (root / "records.jsonl").exists():
        raise FileNotFoundError(f"{root} is not a run directory (records.jsonl missing)")
    config = load_scenario(root / "scenario.json")
    with open(root / "records.jsonl") as fh:
        records = [record_from_json(json.loads(line)) for line in fh if line.strip()]
    return config, records


def stored_model_files(run_dir: str | Path, round: int) -> list[Path]:
    return sorted((Path(run_dir) / "rounds" / str(round)).rglob("*.bin"))

