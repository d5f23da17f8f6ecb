import random
from dataclasses import replace

import numpy as np
import pytest

from conftest import bidirectional, corpus, deep, full, inbound, outbound, partial
from fedtrack import learner
from fedtrack.engine import (
    EngineError,
    ModelState,
    RewindError,
    Simulation,
    Update,
    aggregate_track,
    derive_seed,
    local_train,
    run_scenario,
    training_seed,
    weighted_mean,
)
from fedtrack.policy import LearnerSpec, RewindMode, make_scenario
from fedtrack.provenance import EMPTY, InfluenceSet
from fedtrack.resolution import track_id

C1, C2, C3, C4 = range(4)


def small(n, rounds, ds=(), **kw):
    return make_scenario(n, rounds, ds, seed=kw.pop("seed", 3), **kw)


def _state(w, ref="base", infl=EMPTY):
    return ModelState(np.asarray(w, dtype=float), 0, "t", infl, ref)


def _update(client, w, samples, base="base", infl=EMPTY):
    return Update(client, "t", 0, base, f"u{client}", samples, _state(w, f"u{client}", infl))


# -- aggregation ------------------------------------------------------------


def test_weighted_mean_arithmetic():
    assert weighted_mean([np.array([0.0, 0.0]), np.array([2.0, 4.0])], [1, 3]).tolist() == [1.5, 3.0]


def test_identical_inputs_are_returned_bit_exactly():
    v = np.random.default_rng(0).normal(size=50)
    out = weighted_mean([v.copy(), v.copy(), v.copy()], [3, 7, 11])
    assert out.tobytes() == v.tobytes()


def test_equal_counts_give_plain_mean():
    rng = np.random.default_rng(1)
    vs = [rng.normal(size=5) for _ in range(4)]
    assert np.allclose(weighted_mean(vs, [9] * 4), np.mean(vs, axis=0), rtol=0, atol=1e-14)


def test_aggregate_is_permutation_invariant_and_unions_influence():
    rng = np.random.default_rng(2)
    ups = [_update(c, rng.normal(size=4), 5 + c, infl=InfluenceSet([(c, 0)])) for c in range(4)]
    start = _state(np.zeros(4))
    a = aggregate_track("t", 0, start, ups)
    shuffled = ups[:]
    random.Random(0).shuffle(shuffled)
    b = aggregate_track("t", 0, start, shuffled)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.influence == {(c, 0) for c in range(4)}


def test_aggregate_without_updates_carries_over():
    start = _state([1.0, 2.0], infl=InfluenceSet([(0, 0)]))
    out = aggregate_track("t", 1, start, [])
    assert out.weights.tolist() == [1.0, 2.0] and out.influence == start.influence


def test_fairness_precondition_is_enforced_only_when_asked():
    start = _state([0.0])
    bad = _update(0, [1.0], 1, base="elsewhere")
    with pytest.raises(EngineError, match="fairness"):
        aggregate_track("t", 0, start, [bad])
    assert aggregate_track("t", 0, start, [bad], enforce_fairness=False).weights.tolist() == [1.0]


# -- local training ---------------------------------------------------------


def _data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.integers(0, 2, n)


def test_local_train_is_pure_and_gains_contributor():
    base = _state(np.zeros(8))
    kw = dict(spec=LearnerSpec(), task="classification", classes=2, seed=5)
    a = local_train(C2, base, "t", 4, _data(), **kw)
    b = local_train(C2, base, "t", 4, _data(), **kw)
    assert a.model.weights.tobytes() == b.model.weights.tobytes()
    assert a.model.influence == {(C2, 4)}
    assert a.samples == 40 and a.base_ref == "base"


def test_zero_epochs_submits_nothing():
    base = _state(np.zeros(8))
    out = local_train(C1, base, "t", 0, _data(), spec=LearnerSpec(epochs=0), task="classification", classes=2, seed=0)
    assert out is None


def test_empty_data_submits_nothing():
    base = _state(np.zeros(8))
    X, y = _data()
    out = local_train(C1, base, "t", 0, (X[:0], y[:0]), spec=LearnerSpec(), task="classification", classes=2, seed=0)
    assert out is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_round_and_track():
    base = _state(np.zeros(4))
    X = np.full((20, 3), 1e200)
    y = np.ones(20)
    with pytest.raises(EngineError, match=r"round 2, track t"):
        local_train(C1, base, "t", 2, (X, y), spec=LearnerSpec(learning_rate=10.0), task="regression", classes=0, seed=0)


def test_training_seed_depends_on_every_part():
    seeds = {training_seed(1, 0, 0, "a"), training_seed(2, 0, 0, "a"), training_seed(1, 1, 0, "a"),
             training_seed(1, 0, 1, "a"), training_seed(1, 0, 0, "b")}
    assert len(seeds) == 5
    assert derive_seed(1, "x") == derive_seed(1, "x")


def test_partial_mask_halves_training_samples():
    cfg = small(3, 2, [partial(C2, 0.5)])
    sim = Simulation(cfg)
    X, y = sim.train_view(C2, 0)
    assert len(y) == 45  # 100 samples, 10 held out, half of the rest withheld
    rec = sim.step(0)
    assert {u.client: u.samples for u in rec.updates}[C2] == 45


# -- round loop -------------------------------------------------------------


def test_single_inbound_background_participation():
    recs = run_scenario(small(3, 10, [inbound(C1, C3)]))
    glob = track_id(frozenset({C1, C2, C3}))
    for rec in recs:
        assert len(rec.plan.tracks) == 2
        assert rec.background == 2  # C1 and C2 each train on their non-primary track
        assert {(u.client, u.track) for u in rec.updates if u.track == glob} == {(C1, glob), (C2, glob), (C3, glob)}
        assert set(rec.metrics) == set(rec.plan.tracks)
        assert all(v >= 0 for v in rec.timings.values())


def test_global_track_aggregates_everyone_gm1_only_two():
    rec = run_scenario(small(3, 1, [inbound(C1, C3)]))[0]
    glob, gm1 = track_id(frozenset({0, 1, 2})), track_id(frozenset({0, 1}))
    assert len(rec.aggregated[glob]) == 3 and len(rec.aggregated[gm1]) == 2


def test_zero_disagreements_is_plain_fedavg():
    cfg = small(4, 5)
    recs = run_scenario(cfg)
    sim = Simulation(cfg)
    w = sim.init_model.weights
    tid = track_id(cfg.roster)
    for r in range(5):
        locals_, counts = [], []
        for c in range(4):
            X, y = sim.dataset.train_view(c)
            rng = np.random.default_rng(training_seed(cfg.seed, c, r, tid))
            locals_.append(learner.sgd(w, X, y, task="classification", classes=10, epochs=1,
                                       learning_rate=0.1, batch_size=16, rng=rng))
            counts.append(len(y))
        plain = np.average(locals_, axis=0, weights=counts)
        w = weighted_mean(locals_, counts)
        assert np.allclose(w, plain, rtol=0, atol=1e-12)
        assert recs[r].models[tid].tobytes() == w.tobytes()


def test_mid_session_track_seeds_from_previous_global():
    sim = Simulation(small(3, 7, [inbound(C1, C3, start_round=5)]))
    recs = sim.run()
    new = track_id(frozenset({C1, C2}))
    glob = track_id(frozenset({C1, C2, C3}))
    assert recs[5].created == (new,)
    seed = next(n for n in recs[5].lineage if n.ref == recs[5].track_start[new])
    assert seed.kind == "seed" and seed.parents == (recs[4].track_aggregate[glob],)
    assert recs[5].models[new].tobytes() != recs[5].models[glob].tobytes()


def test_seed_tie_break_prefers_smaller_track_id():
    # C1 and C2 sit on different tracks, then a new disagreement puts them in one group
    cfg = small(4, 4, [inbound(C1, C4, duration=2), inbound(C2, C3, duration=2),
                        inbound(C1, C3, start_round=2), inbound(C1, C4, start_round=2),
                        inbound(C2, C3, start_round=2), inbound(C2, C4, start_round=2)])
    sim = Simulation(cfg)
    recs = sim.run()
    a, b = track_id(frozenset({C1, C2, C3})), track_id(frozenset({C1, C2, C4}))
    new = track_id(frozenset({C1, C2}))
    assert new in recs[2].created
    seed = next(n for n in recs[2].lineage if n.ref == recs[2].track_start[new])
    assert seed.parents == (recs[1].track_aggregate[min(a, b)],)


def test_cold_start_when_no_predecessor_is_admissible():
    # C2's previous model (global) carries C3 updates from rounds where C1 already
    # excluded C3, so the new track {C1, C2} cannot inherit it and starts from init
    cfg = small(4, 5, [inbound(C1, C3), inbound(C2, C3, start_round=3), inbound(C2, C4, start_round=3)])
    recs = run_scenario(cfg)
    new = track_id(frozenset({C1, C2}))
    assert new in recs[3].created
    seed = next(n for n in recs[3].lineage if n.ref == recs[3].track_start[new])
    assert seed.parents == ("init",)
    from fedtrack.provenance import check_isolation

    assert check_isolation(recs, cfg) == []


def test_temporary_lifecycle_track_counts():
    cfg = small(5, 16, [inbound(C1, 4, duration=5, start_round=3), inbound(C2, C4, duration=10, start_round=5)])
    counts = [len(r.plan.tracks) for r in run_scenario(cfg)]
    assert counts == [1, 1, 1, 2, 2, 3, 3, 3, 2, 2, 2, 2, 2, 2, 2, 1]


def test_expired_client_rejoins_surviving_track_model():
    cfg = small(3, 6, [inbound(C1, C3, duration=2, start_round=1)])
    recs = run_scenario(cfg)
    glob = track_id(frozenset({0, 1, 2}))
    assert recs[3].plan.primary[C1] == glob
    assert recs[3].track_start[glob] == recs[2].track_aggregate[glob]
    assert recs[3].dissolved == (track_id(frozenset({0, 1})),)


def test_fully_excluded_client_trains_nowhere():
    recs = run_scenario(small(3, 3, [full(C2, start_round=1)]))
    assert C2 in {u.client for u in recs[0].updates}
    assert all(u.client != C2 for r in recs[1:] for u in r.updates)
    assert C2 not in recs[2].delivered


def test_all_clients_withdrawn_leaves_empty_train_phase():
    recs = run_scenario(small(2, 3, [full(C1, start_round=1), full(C2, start_round=1)]))
    assert recs[1].plan.tracks == {} and recs[1].updates == ()


def test_track_count_bound():
    for cfg in corpus("robust"):
        for rec in run_scenario(replace(cfg, rounds=4)):
            assert len(rec.plan.tracks) == len(rec.plan.family())


def test_deterministic_across_thread_counts():
    cfg = small(5, 6, [inbound(C1, C3), outbound(C2, C4), bidirectional(C1, 4, start_round=2)])
    a = [r.fingerprint() for r in run_scenario(cfg, threads=1)]
    b = [r.fingerprint() for r in run_scenario(cfg, threads=4)]
    assert a == b


def test_model_count_matches_persisted_files(tmp_path):
    from fedtrack.rundir import stored_model_files

    cfg = small(3, 3, [inbound(C1, C3)])
    recs = run_scenario(cfg, out_dir=tmp_path, persist_models=True)
    for rec in recs:
        assert rec.model_count == len(stored_model_files(tmp_path, rec.round))
        assert rec.model_count == len(rec.plan.tracks) + sum(len(m) for m in rec.plan.tracks.values())


# -- deep rewind ------------------------------------------------------------


def test_vacuous_rewind_returns_model_unchanged():
    sim = Simulation(small(3, 3, [full(C3)]), retain_locals=True)
    sim.step(0)
    sim.step(1)
    tid = track_id(frozenset({C1, C2}))
    current = sim.live[tid].current
    out, nodes, rec = sim.rewind_deep(current, frozenset({C3}), tid, 2)
    assert out is current and nodes == [] and rec is None


def test_reaggregate_two_client_example():
    # local models [1,1] and [3,3]; dropping the second leaves [1,1]
    sim = Simulation(small(2, 1), retain_locals=True)
    sim.step(0)
    tid = track_id(frozenset({0, 1}))
    tr = sim.history[(0, tid)]
    start = tr.start
    tr.updates[0] = replace(tr.updates[0], model=replace(tr.updates[0].model, weights=np.ones_like(start.weights)), samples=10)
    tr.updates[1] = replace(tr.updates[1], model=replace(tr.updates[1].model, weights=np.full_like(start.weights, 3.0)), samples=10)
    sim.config = replace(sim.config, rewind_mode=RewindMode.REAGGREGATE)
    out, nodes, rec = sim.rewind_deep(tr.aggregate, frozenset({1}), tid, 1)
    assert np.array_equal(out.weights, np.ones_like(start.weights))
    assert out.influence == {(0, 0)}
    assert rec.excluded == frozenset({1})


def test_reaggregate_without_retention_fails():
    sim = Simulation(small(3, 4, [deep(inbound(C1, C3, start_round=2))]), retain_locals=False)
    with pytest.raises(RewindError, match="retention required for deep exclusion"):
        sim.run()


def test_retrain_matches_fresh_run_bit_exactly():
    k = 4
    late = small(3, 2 * k, [deep(inbound(C1, C3, start_round=k))], rewind_mode=RewindMode.RETRAIN)
    early = small(3, 2 * k, [deep(inbound(C1, C3))], rewind_mode=RewindMode.RETRAIN)
    a, b = run_scenario(late), run_scenario(early)
    tid = a[-1].plan.primary[C1]
    assert tid == b[-1].plan.primary[C1]
    assert a[-1].models[tid].tobytes() == b[-1].models[tid].tobytes()
    assert C3 not in a[-1].influence[tid].clients()
    assert a[k].rewinds and a[k].rewinds[0].mode == "retrain"


def test_retention_only_when_deep_rules_exist():
    assert not Simulation(small(3, 2, [inbound(C1, C3)])).retain
    assert Simulation(small(3, 2, [deep(inbound(C1, C3))])).retain


def test_threads_env(monkeypatch):
    monkeypatch.setenv("FEDTRACK_THREADS", "3")
    assert Simulation(small(2, 1)).threads == 3
    monkeypatch.setenv("FEDTRACK_THREADS", "lots")
    with pytest.raises(EngineError):
        Simulation(small(2, 1))
