import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SCENARIOS, bidirectional, corpus, deep, full, inbound, partial
from fedtrack.policy import (
    Depth,
    Disagreement,
    DisagreementType,
    Resolver,
    ScenarioError,
    active_disagreements,
    client_name,
    load_scenario,
    make_scenario,
    parse_client,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)


def test_client_names_round_trip():
    for i in range(20):
        assert parse_client(client_name(i)) == i
    assert client_name(0) == "C1"
    with pytest.raises(ScenarioError):
        parse_client("C0")
    with pytest.raises(ScenarioError):
        parse_client("client1")


def test_self_exclusion_is_reported():
    errors = validate_scenario(make_scenario(3, 5, [inbound(1, 1)]))
    assert any("self-exclusion" in e and "disagreements[0]" in e for e in errors)


def test_unknown_client_is_reported():
    errors = validate_scenario(make_scenario(3, 5, [inbound(0, 6)]))
    assert any("unknown client C7" in e for e in errors)


def test_single_inbound_config_is_valid():
    assert validate_scenario(make_scenario(3, 20, [inbound(0, 2)])) == []


@pytest.mark.parametrize(
    "d, fragment",
    [
        (Disagreement(DisagreementType.INBOUND, 0), "missing target"),
        (Disagreement(DisagreementType.FULL, 0, 1), "takes no target"),
        (Disagreement(DisagreementType.PARTIAL_DATA, 0), "requires data_mask"),
        (partial(0, 1.0), "data_mask must lie"),
        (deep(partial(0, 0.5)), "deep partial_data"),
        (Disagreement(DisagreementType.INBOUND, 0, 1, data_mask=0.2), "only allowed on partial_data"),
        (inbound(0, 1, duration=0), "at least 1 round"),
        (inbound(0, 1, start_round=-1), "non-negative"),
    ],
)
def test_rule_violations(d, fragment):
    errors = validate_scenario(make_scenario(3, 5, [d]))
    assert any(fragment in e for e in errors), errors


def test_every_error_is_collected():
    errors = validate_scenario(make_scenario(2, 0, [inbound(0, 0), inbound(0, 5)]))
    assert len(errors) == 3


def test_temporary_window():
    d = inbound(0, 1, duration=3, start_round=2)
    cfg = make_scenario(3, 10, [d])
    assert [bool(active_disagreements(cfg, r)) for r in (1, 2, 4, 5)] == [False, True, True, False]


def test_indefinite_persists():
    cfg = make_scenario(3, 10, [inbound(0, 1)])
    assert active_disagreements(cfg, 9) == [inbound(0, 1)]


def test_empty_list_is_always_empty():
    cfg = make_scenario(3, 10)
    assert all(active_disagreements(cfg, r) == [] for r in range(10))


def test_active_preserves_config_order():
    ds = [full(2), inbound(0, 1), bidirectional(1, 2, start_round=3)]
    cfg = make_scenario(3, 10, ds)
    assert active_disagreements(cfg, 5) == ds


@given(st.integers(0, 30), st.integers(1, 30))
def test_temporary_active_on_exactly_duration_rounds(start, duration):
    d = inbound(0, 1, duration=duration, start_round=start)
    assert sum(d.active_at(r) for r in range(start + duration + 10)) == duration


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 5), st.integers(1, 4)), max_size=6),
       st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 5), st.integers(1, 4)),
       st.integers(0, 12))
def test_adding_a_disagreement_never_removes_another(rows, extra, r):
    ds = [inbound(a, b, start_round=s, duration=e) for a, b, s, e in rows]
    before = active_disagreements(make_scenario(4, 12, ds), r)
    after = active_disagreements(make_scenario(4, 12, ds + [inbound(*extra[:2], start_round=extra[2], duration=extra[3])]), r)
    for d in before:
        assert d in after


def test_json_round_trip(tmp_path):
    cfg = make_scenario(
        4,
        7,
        [inbound(0, 1, duration=3, start_round=1), deep(full(3)), partial(2, 0.25)],
        resolver=Resolver.NAIVE,
        seed=42,
        name="rt",
    )
    path = tmp_path / "rt.json"
    save_scenario(cfg, path)
    assert load_scenario(path) == cfg
    raw = json.loads(path.read_text())
    assert raw["schema_version"] == 1
    assert raw["disagreements"][0]["duration"] == {"temporary": 3}
    assert raw["disagreements"][1]["duration"] == "indefinite"
    assert raw["disagreements"][1]["depth"] == "deep"


def test_schema_version_required():
    raw = scenario_to_dict(make_scenario(3, 2))
    del raw["schema_version"]
    with pytest.raises(ScenarioError, match="schema_version"):
        scenario_from_dict(raw)
    raw["schema_version"] = 2
    with pytest.raises(ScenarioError, match="schema_version"):
        scenario_from_dict(raw)


def test_bad_files_raise_scenario_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(bad)
    bad.write_text(json.dumps({"schema_version": 1, "client_count": 3, "rounds": 2,
                               "disagreements": [{"type": "sideways", "initiator": "C1"}]}))
    with pytest.raises(ScenarioError, match="sideways"):
        load_scenario(bad)
    bad.write_text(json.dumps({"schema_version": 1, "client_count": 3, "rounds": 2,
                               "disagreements": [{"type": "inbound", "initiator": "C1", "target": "C2",
                                                  "duration": {"forever": 1}}]}))
    with pytest.raises(ScenarioError, match="duration"):
        load_scenario(bad)


def test_name_defaults_to_file_stem(tmp_path):
    raw = scenario_to_dict(make_scenario(3, 2))
    raw["name"] = ""
    p = tmp_path / "my_case.json"
    p.write_text(json.dumps(raw))
    assert load_scenario(p).name == "my_case"


def test_overrides():
    cfg = make_scenario(3, 2, seed=1)
    assert cfg.with_overrides(seed=9).seed == 9
    assert cfg.with_overrides(resolver="naive").resolver is Resolver.NAIVE
    assert cfg.with_overrides() == cfg


def test_shipped_corpus_validates():
    configs = corpus()
    assert len(configs) >= 17
    for cfg in configs:
        assert validate_scenario(cfg) == [], cfg.name


def test_has_deep():
    assert make_scenario(3, 2, [deep(inbound(0, 1))]).has_deep
    assert not make_scenario(3, 2, [inbound(0, 1)]).has_deep
    assert deep(inbound(0, 1)).depth is Depth.DEEP
