"""Disagreement taxonomy, scenario configuration and temporal filtering.

Clients are identified internally by 0-based integers; scenario files and
every human-facing output use the display names ``C1``, ``C2``, ...
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

SCHEMA_VERSION = 1

_CLIENT_RE = re.compile(r"^C([1-9][0-9]*)$")


class ScenarioError(ValueError):
    """Raised when a scenario document cannot be parsed at all."""


class DisagreementType(str, Enum):
    FULL = "full"
    INBOUND = "inbound"
    OUTBOUND = "outbound"
    BIDIRECTIONAL = "bidirectional"
    PARTIAL_DATA = "partial_data"

    @property
    def needs_target(self) -> bool:
        return self in (DisagreementType.INBOUND, DisagreementType.OUTBOUND, DisagreementType.BIDIRECTIONAL)


class Depth(str, Enum):
    SHALLOW = "shallow"
    DEEP = "deep"


class Resolver(str, Enum):
    ROBUST = "robust"
    NAIVE = "naive"


class RewindMode(str, Enum):
    REAGGREGATE = "reaggregate"
    RETRAIN = "retrain"


def client_name(client: int) -> str:
    return f"C{client + 1}"


def parse_client(name: str) -> int:
    m = _CLIENT_RE.match(str(name))
    if m is None:
        raise ScenarioError(f"invalid client name {name!r} (expected 'C<n>')")
    return int(m.group(1)) - 1


@dataclass(frozen=True, slots=True)
class Disagreement:
    """One exclusion rule.

    ``duration`` is ``None`` for an indefinite exclusion, otherwise the number
    of rounds (counted from ``start_round``) during which it is active.
    ``data_mask`` is the withheld fraction of the initiator's training samples
    and is only meaningful for partial-data exclusions.
    """

    type: DisagreementType
    initiator: int
    target: int | None = None
    duration: int | None = None
    depth: Depth = Depth.SHALLOW
    start_round: int = 0
    data_mask: float | None = None

    @property
    def temporary(self) -> bool:
        return self.duration is not None

    def active_at(self, round: int) -> bool:
        if round < self.start_round:
            return False
        return self.duration is None or round < self.start_round + self.duration

    def describe(self) -> str:
        who = client_name(self.initiator)
        if self.target is not None:
            who += f"->{client_name(self.target)}"
        life = "indefinite" if self.duration is None else f"temporary({self.duration})"
        return f"{self.type.value}({who}, {life}, {self.depth.value}, from r{self.start_round})"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "classification"  # classification | regression | idx
    samples_per_client: int = 100
    dims: int = 10
    classes: int = 10
    alpha: float = 1.0
    separation: float = 1.0
    noise: float = 0.1
    images: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class LearnerSpec:
    epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 16


@dataclass(frozen=True)
class ScenarioConfig:
    client_count: int
    rounds: int
    disagreements: tuple[Disagreement, ...] = ()
    resolver: Resolver = Resolver.ROBUST
    rewind_mode: RewindMode = RewindMode.REAGGREGATE
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    seed: int = 0
    name: str = ""

    @property
    def roster(self) -> frozenset[int]:
        return frozenset(range(self.client_count))

    @property
    def has_deep(self) -> bool:
        return any(d.depth is Depth.DEEP for d in self.disagreements)

    def with_overrides(self, *, seed: int | None = None, resolver: str | Resolver | None = None) -> ScenarioConfig:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if resolver is not None:
            cfg = replace(cfg, resolver=Resolver(resolver))
        return cfg


def validate_scenario(config: ScenarioConfig) -> list[str]:
    """Return every rule the configuration violates; empty means well-formed."""
    errors: list[str] = []
    if config.client_count < 1:
        errors.append("client_count: must be at least 1")
    if config.rounds < 1:
        errors.append("rounds: must be at least 1")

    roster = range(config.client_count)
    for i, d in enumerate(config.disagreements):
        where = f"disagreements[{i}]"
        if d.initiator not in roster:
            errors.append(f"{where}: unknown client {client_name(d.initiator)} (initiator)")
        if d.target is not None and d.target not in roster:
            errors.append(f"{where}: unknown client {client_name(d.target)} (target)")
        if d.type.needs_target and d.target is None:
            errors.append(f"{where}: missing target for {d.type.value} exclusion")
        if not d.type.needs_target and d.target is not None:
            errors.append(f"{where}: {d.type.value} exclusion takes no target")
        if d.target is not None and d.target == d.initiator:
            errors.append(f"{where}: self-exclusion ({client_name(d.initiator)} targets itself)")
        if d.duration is not None and d.duration < 1:
            errors.append(f"{where}: temporary duration must be at least 1 round")
        if d.start_round < 0:
            errors.append(f"{where}: start_round must be non-negative")
        if d.type is DisagreementType.PARTIAL_DATA:
            if d.data_mask is None:
                errors.append(f"{where}: partial_data exclusion requires data_mask")
            elif not 0.0 <= d.data_mask < 1.0:
                errors.append(f"{where}: data_mask must lie in [0, 1)")
            if d.depth is Depth.DEEP:
                errors.append(f"{where}: deep partial_data exclusion is not supported")
        elif d.data_mask is not None:
            errors.append(f"{where}: data_mask is only allowed on partial_data exclusions")

    ds = config.dataset
    if ds.kind not in ("classification", "regression", "idx"):
        errors.append(f"dataset.kind: unknown kind {ds.kind!r}")
    if ds.kind == "idx":
        if not ds.images or not ds.labels:
            errors.append("dataset: idx datasets need both images and labels paths")
    else:
        if ds.samples_per_client < 1 or ds.dims < 1 or ds.classes < 1:
            errors.append("dataset: samples_per_client, dims and classes must be positive")
        elif ds.kind == "classification" and ds.classes > ds.samples_per_client:
            errors.append("dataset: more classes than samples per client")
    if ds.alpha <= 0:
        errors.append("dataset.alpha: must be positive")

    ln = config.learner
    if ln.epochs < 0:
        errors.append("learner.epochs: must be non-negative")
    if ln.learning_rate <= 0:
        errors.append("learner.learning_rate: must be positive")
    if ln.batch_size < 1:
        errors.append("learner.batch_size: must be at least 1")
    return errors


def active_disagreements(config: ScenarioConfig, round: int) -> list[Disagreement]:
    """Disagreements whose activity window covers ``round``, in config order."""
    return [d for d in config.disagreements if d.active_at(round)]


# -- scenario files ---------------------------------------------------------


def _parse_duration(raw: Any) -> int | None:
    if raw is None or raw == "indefinite":
        return None
    if isinstance(raw, dict) and set(raw) == {"temporary"}:
        return int(raw["temporary"])
    raise ScenarioError(f"invalid duration {raw!r} (use 'indefinite' or {{'temporary': n}})")


def _enum(cls, raw: Any, what: str):
    try:
        return cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ScenarioError(f"invalid {what} {raw!r} (one of: {allowed})") from None


def disagreement_from_dict(raw: dict[str, Any]) -> Disagreement:
    try:
        target = raw.get("target")
        mask = raw.get("data_mask")
        return Disagreement(
            type=_enum(DisagreementType, raw["type"], "disagreement type"),
            initiator=parse_client(raw["initiator"]),
            target=None if target is None else parse_client(target),
            duration=_parse_duration(raw.get("duration")),
            depth=_enum(Depth, raw.get("depth", "shallow"), "depth"),
            start_round=int(raw.get("start_round", 0)),
            data_mask=None if mask is None else float(mask),
        )
    except KeyError as exc:
        raise ScenarioError(f"disagreement is missing field {exc.args[0]!r}") from None


def disagreement_to_dict(d: Disagreement) -> dict[str, Any]:
    return {
        "type": d.type.value,
        "initiator": client_name(d.initiator),
        "target": None if d.target is None else client_name(d.target),
        "duration": "indefinite" if d.duration is None else {"temporary": d.duration},
        "depth": d.depth.value,
        "start_round": d.start_round,
        "data_mask": d.data_mask,
    }


def scenario_from_dict(raw: dict[str, Any]) -> ScenarioConfig:
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    for key in ("client_count", "rounds"):
        if key not in raw:
            raise ScenarioError(f"scenario is missing field {key!r}")
    try:
        dataset = DatasetSpec(**raw.get("dataset", {}))
        learner = LearnerSpec(**raw.get("learner", {}))
    except TypeError as exc:
        raise ScenarioError(str(exc)) from None
    return ScenarioConfig(
        client_count=int(raw["client_count"]),
        rounds=int(raw["rounds"]),
        disagreements=tuple(disagreement_from_dict(d) for d in raw.get("disagreements", [])),
        resolver=_enum(Resolver, raw.get("resolver", "robust"), "resolver"),
        rewind_mode=_enum(RewindMode, raw.get("rewind_mode", "reaggregate"), "rewind_mode"),
        dataset=dataset,
        learner=learner,
        seed=int(raw.get("seed", 0)),
        name=str(raw.get("name", "")),
    )


def scenario_to_dict(config: ScenarioConfig) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "client_count": config.client_count,
        "rounds": config.rounds,
        "seed": config.seed,
        "resolver": config.resolver.value,
        "rewind_mode": config.rewind_mode.value,
        "dataset": asdict(config.dataset),
        "learner": asdict(config.learner),
        "disagreements": [disagreement_to_dict(d) for d in config.disagreements],
    }


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    cfg = scenario_from_dict(raw)
    if not cfg.name:
        cfg = replace(cfg, name=path.stem)
    return cfg


def save_scenario(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(config), indent=2) + "\n")


def make_scenario(client_count: int, rounds: int, disagreements: Iterable[Disagreement] = (), **kwargs) -> ScenarioConfig:
    """Convenience constructor used by tests and sweeps."""
    return ScenarioConfig(client_count=client_count, rounds=rounds, disagreements=tuple(disagreements), **kwargs)
