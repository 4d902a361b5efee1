from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disaggsim import failures as fl
from disaggsim.catalog import GIB, Deployment, FailureClass, ServingUnitConfig, build_default_catalog, default_nodes
from disaggsim.errors import ConfigError, SimulationInvariantError
from disaggsim.model import ModelSpec, synth_tables
from disaggsim.unit import build_unit

NODES = default_nodes(build_default_catalog())
DAY_US = 86_400 * 1e6
TABLES = tuple(synth_tables(64 * GIB, 30, seed=4))
MODEL = ModelSpec("f", TABLES, 0.01, 1.0)


def disagg(m_mns: int = 2, n_replicas: int | None = None, n_cns: int = 2):
    cfg = ServingUnitConfig(NODES["cn_1gpu"], n_cns, NODES["ddr_mn"], m_mns)
    return build_unit(MODEL, cfg, n_replicas=n_replicas)


def mono(n: int = 2):
    return build_unit(MODEL, ServingUnitConfig.monolithic(NODES["so1s_1gpu"], n))


# -- trace generation --------------------------------------------------

def test_zero_probability_gives_empty_trace():
    assert len(fl.gen_failure_trace({"a": fl.FailureProfile(0.0)}, 30, seed=1)) == 0


def test_certain_failure_once_per_day():
    tr = fl.gen_failure_trace({"a": fl.FailureProfile(1.0, migrate_delay_s=30.0)}, 1, seed=1)
    assert [e.kind for e in tr.events] == ["fail", "recover"]
    fail, rec = tr.events
    assert 0 <= fail.time_us < DAY_US
    assert rec.time_us - fail.time_us == pytest.approx(30e6)


def test_failure_count_matches_rate():
    # 100 nodes x 100 days at 7%: mean 700, sd = sqrt(10000 * 0.07 * 0.93) = 25.5
    nodes = {f"n{i}": fl.FailureProfile(0.07) for i in range(100)}
    count = fl.gen_failure_trace(nodes, 100, seed=9).fail_count()
    assert abs(count - 700) <= 3 * math.sqrt(10_000 * 0.07 * 0.93)


def test_trace_is_reproducible_and_roundtrips():
    nodes = {f"n{i}": fl.FailureProfile(0.3) for i in range(5)}
    a = fl.gen_failure_trace(nodes, 20, seed=2)
    assert a == fl.gen_failure_trace(nodes, 20, seed=2)
    assert fl.FailureTrace.from_csv(a.to_csv()) == a


def test_trace_validation():
    with pytest.raises(ConfigError):
        fl.FailureTrace([fl.FailureEvent(0.0, "a", "recover")])
    with pytest.raises(ConfigError):
        fl.FailureTrace([fl.FailureEvent(0.0, "a", "explode")])
    with pytest.raises(ConfigError):
        fl.FailureTrace.from_csv("t,n,k\n")
    with pytest.raises(ConfigError):
        fl.FailureProfile(1.5)


def test_default_rates_and_profiles():
    rates = fl.default_rates()
    assert rates == {FailureClass.GPU: 0.07, FailureClass.CPU: 0.004, FailureClass.MN: 0.0004}
    profs = fl.unit_profiles(disagg())
    assert profs["cn0"].daily_fail_prob == 0.07
    assert profs["cn0"].recovery_model is fl.RecoveryModel.MIGRATE_TASK
    assert profs["mn0"].recovery_model is fl.RecoveryModel.REROUTE_OR_REINIT
    assert fl.unit_profiles(mono())["srv0"].recovery_model is fl.RecoveryModel.WHOLE_SERVER


@given(p=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_nodes_fail_independently(p, seed):
    # adding a node with zero failure rate never changes other nodes' draws
    base = {"a": fl.FailureProfile(p), "c": fl.FailureProfile(p)}
    one = fl.gen_failure_trace(base, 10, seed)
    two = fl.gen_failure_trace({**base, "b": fl.FailureProfile(0.0)}, 10, seed)
    assert [e for e in one.events if e.node_id == "a"] == [e for e in two.events if e.node_id == "a"]
    assert len(two) <= 2 * 2 * 10
    for e in two.events:
        assert e.node_id != "b"


# -- recovery actions --------------------------------------------------

def test_cn_failure_migrates_and_keeps_routing():
    state = disagg()
    before = state.routing
    act = fl.apply_failure(state, "cn1", fl.FailureProfile(0.07, migrate_delay_s=30))
    assert act == fl.MigrateTask("cn1", (1,), 30e6)
    fl.fail_now(state, act)
    assert state.down_tasks == {1}
    fl.complete(state, act)
    assert state.down_tasks == set() and state.routing == before


def test_mn_failure_with_two_replicas_reroutes():
    state = disagg(m_mns=3, n_replicas=2)
    act = fl.apply_failure(state, "mn1")
    assert isinstance(act, fl.Reroute) and act.failed_mns == (1,)
    assert 1 not in act.routing.destinations()
    covered = {(t, tb) for t, tb, _ in act.routing.entries}
    assert covered == {(t, tb.table_id) for t in state.task_ids for tb in TABLES}
    fl.fail_now(state, act)
    with pytest.raises(SimulationInvariantError):
        fl.check_routing_live(state)
    fl.complete(state, act)
    fl.check_routing_live(state)


def test_mn_failure_with_one_replica_reinitializes():
    state = disagg(m_mns=2, n_replicas=1)
    victim = next(m for m in state.mns if state.placement.tables_on(m))
    act = fl.apply_failure(state, f"mn{victim}", fl.FailureProfile(0.0, reinit_delay_s=600))
    assert isinstance(act, fl.Reinit) and act.delay_us == 600e6
    assert [b.node_id for b in act.backups] == ["backup2"]
    fl.fail_now(state, act)
    fl.complete(state, act)
    assert victim not in state.mns and 2 in state.mns
    assert state.backups_added == 1
    fl.check_routing_live(state)


def test_monolithic_failure_replaces_server():
    state = mono()
    act = fl.apply_failure(state, "srv1")
    assert isinstance(act, fl.ReplaceServer)
    assert act.task_ids == (1,) and act.mn_ids == (1,)
    routing = state.routing
    fl.fail_now(state, act)
    assert 1 in state.dead_mns and 1 in state.down_tasks
    fl.complete(state, act)
    assert not state.dead_mns and not state.down_tasks and state.routing == routing


def test_unknown_node():
    with pytest.raises(ConfigError):
        fl.apply_failure(disagg(), "gpu9")


def test_apply_failure_does_not_mutate():
    state = disagg(m_mns=3, n_replicas=2)
    snap = state.snapshot()
    fl.apply_failure(state, "mn0")
    assert state.routing == snap.routing and state.dead_mns == snap.dead_mns


def test_scale_up_deployment_is_monolithic():
    assert Deployment.SCALE_UP_NAIVE.is_monolithic
    assert not Deployment.DISAGGREGATED.is_monolithic
