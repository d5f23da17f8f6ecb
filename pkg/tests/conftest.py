from pathlib import Path

import pytest

from fedtrack.policy import Depth, Disagreement, DisagreementType, load_scenario

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
GOLDEN = Path(__file__).resolve().parent / "golden"


def inbound(a, b, **kw):
    return Disagreement(DisagreementType.INBOUND, a, b, **kw)


def outbound(a, b, **kw):
    return Disagreement(DisagreementType.OUTBOUND, a, b, **kw)


def bidirectional(a, b, **kw):
    return Disagreement(DisagreementType.BIDIRECTIONAL, a, b, **kw)


def full(a, **kw):
    return Disagreement(DisagreementType.FULL, a, **kw)


def partial(a, mask, **kw):
    return Disagreement(DisagreementType.PARTIAL_DATA, a, data_mask=mask, **kw)


def deep(d: Disagreement) -> Disagreement:
    from dataclasses import replace

    return replace(d, depth=Depth.DEEP)


def corpus(resolver: str | None = None):
    files = sorted(p for p in SCENARIOS.glob("*.json") if not p.name.startswith("sweep"))
    configs = [load_scenario(p) for p in files]
    if resolver is not None:
        configs = [c for c in configs if c.resolver.value == resolver]
    return configs


@pytest.fixture
def scenario():
    return lambda name: load_scenario(SCENARIOS / f"{name}.json")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
