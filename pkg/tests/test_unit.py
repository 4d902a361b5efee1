from __future__ import annotations

import pytest

from disaggsim.catalog import GIB, Deployment, ServingUnitConfig, build_default_catalog, default_nodes
from disaggsim.errors import CapacityError
from disaggsim.model import ModelSpec, synth_tables
from disaggsim.perfmodel import naive_numa_effective_bw
from disaggsim.unit import Scheduler, build_unit, routed_tables

NODES = default_nodes(build_default_catalog())
MODEL = ModelSpec("u", tuple(synth_tables(64 * GIB, 12, seed=5)), 0.02, 1.0)


def test_disaggregated_roles():
    state = build_unit(MODEL, ServingUnitConfig(NODES["cn_4gpu"], 2, NODES["ddr_mn"], 3))
    assert [t.node_id for t in state.tasks] == ["cn0", "cn1"]
    assert all(t.n_gpus == 4 and t.colocated_mn is None for t in state.tasks)
    assert sorted(state.nodes()) == ["cn0", "cn1", "mn0", "mn1", "mn2"]
    assert state.placement.n_replicas == 3
    assert state.scheduler is Scheduler.SEQUENTIAL


def test_monolithic_roles_are_per_socket():
    state = build_unit(MODEL, ServingUnitConfig.monolithic(NODES["su2s"], 1, Deployment.SCALE_UP_NUMA_AWARE))
    assert len(state.tasks) == len(state.mns) == 2
    assert [t.colocated_mn for t in state.tasks] == [0, 1]
    assert state.nodes() == {"srv0": ([0, 1], [0, 1])}


def test_naive_scale_up_reads_everything_locally():
    state = build_unit(MODEL, ServingUnitConfig.monolithic(NODES["su2s"], 1, Deployment.SCALE_UP_NAIVE))
    assert state.local_only
    for t in state.tasks:
        assert list(state.packets(t.task_id)) == [t.colocated_mn]
    assert state.mn_bandwidth(0) == naive_numa_effective_bw()


def test_routed_tables_cover_model():
    state = build_unit(MODEL, ServingUnitConfig(NODES["cn_1gpu"], 2, NODES["ddr_mn"], 2))
    for task in state.task_ids:
        got = sorted(t.table_id for ts in routed_tables(state, task).values() for t in ts)
        assert got == [t.table_id for t in MODEL.tables]


def test_capacity_is_bottleneck_rate():
    state = build_unit(MODEL, ServingUnitConfig(NODES["cn_1gpu"], 1, NODES["ddr_mn"], 1))
    costs = state.per_sample_costs(128)
    assert state.capacity_qps(128, 10) == pytest.approx(1e6 / max(costs.values()) / 10)


def test_model_too_big():
    big = ModelSpec("big", tuple(synth_tables(1.5 * 1024 * GIB, 10, seed=1)), 0.02, 1.0)
    with pytest.raises(CapacityError):
        build_unit(big, ServingUnitConfig(NODES["cn_1gpu"], 1, NODES["ddr_mn"], 1))


def test_snapshot_is_independent():
    state = build_unit(MODEL, ServingUnitConfig(NODES["cn_1gpu"], 1, NODES["ddr_mn"], 2))
    snap = state.snapshot()
    state.dead_mns.add(0)
    state.down_tasks.add(0)
    assert not snap.dead_mns and not snap.down_tasks
    assert snap.routing == state.routing and snap.routing is not state.routing
