from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disaggsim.catalog import GIB, TIB
from disaggsim.errors import CapacityError, PlacementError, RoutingError
from disaggsim.model import EmbeddingTable, synth_tables
from disaggsim.placement import (
    PlacementPlan,
    ReinitRequired,
    RoutingTable,
    check_plan,
    coefficient_of_variation,
    compute_n_replicas,
    greedy_allocate,
    greedy_route,
    place,
    random_allocate_route,
    rebalance_after_mn_failure,
)

TABLES_1K = synth_tables(1.4 * TIB, 1000, seed=3)
MNS_8 = {i: TIB for i in range(8)}


def gb_table(tid: int, gib: int, dim: int = 64, pooling: float = 10.0) -> EmbeddingTable:
    return EmbeddingTable(tid, gib * GIB // (dim * 4), dim, pooling)


# -- compute_n_replicas ------------------------------------------------

def test_replicas_eight_mns():
    assert compute_n_replicas(TABLES_1K, MNS_8) == 5  # floor(8 / 1.4)


def test_replicas_exact_fit_twice():
    tables = [EmbeddingTable(0, TIB // 256, 64, 80.0)]
    assert compute_n_replicas(tables, {0: TIB, 1: TIB}) == 2


def test_replicas_shortfall():
    with pytest.raises(CapacityError, match="shortfall"):
        compute_n_replicas(synth_tables(1.5 * TIB, 10, seed=1), {0: TIB})


# -- greedy_allocate ---------------------------------------------------

def test_single_table_goes_everywhere():
    t = [gb_table(0, 1)]
    plan = greedy_allocate(t, {0: 2 * GIB, 1: 2 * GIB}, 2)
    assert plan.assignments == {0: (0, 1)}


def test_equal_tables_spread_two_per_mn():
    tables = [gb_table(i, 100) for i in range(4)]
    plan = greedy_allocate(tables, {i: 1024 * GIB for i in range(4)}, 2)
    per_mn = {m: len(plan.tables_on(m)) for m in range(4)}
    assert per_mn == {0: 2, 1: 2, 2: 2, 3: 2}


def test_placed_bytes_spread_bounded():
    plan = place(TABLES_1K, MNS_8)
    placed = plan.placed_bytes(TABLES_1K)
    assert max(placed.values()) - min(placed.values()) <= max(t.size_bytes for t in TABLES_1K)


def test_replicas_out_of_range():
    with pytest.raises(PlacementError):
        greedy_allocate([gb_table(0, 1)], {0: 2 * GIB}, 2)


def test_table_too_big_for_any_mn():
    with pytest.raises(PlacementError):
        greedy_allocate([gb_table(0, 3)], {0: 2 * GIB, 1: 2 * GIB}, 1)


def test_plan_roundtrip():
    plan = place(TABLES_1K[:50], MNS_8)
    assert PlacementPlan.from_dict(plan.to_dict()) == plan


# -- greedy_route ------------------------------------------------------

def test_single_replica_routed_there():
    t = [gb_table(0, 1)]
    plan = PlacementPlan(1, {0: (1,)}, {0: 4 * GIB, 1: 3 * GIB})
    r = greedy_route(plan, t, [0])
    assert r.entries == [(0, 0, 1)]


def test_two_equal_tables_split():
    tables = [gb_table(0, 1), gb_table(1, 1)]
    plan = greedy_allocate(tables, {0: 4 * GIB, 1: 4 * GIB}, 2)
    dests = sorted(mn for _, _, mn in greedy_route(plan, tables, [0]).entries)
    assert dests == [0, 1]


def test_route_balance_bound_1000_tables():
    plan = greedy_allocate(TABLES_1K, MNS_8, 2)
    load = greedy_route(plan, TABLES_1K, [0]).recompute_load(TABLES_1K, MNS_8)
    assert max(load.values()) - min(load.values()) <= max(t.access_weight for t in TABLES_1K)


def test_route_unknown_table():
    with pytest.raises(RoutingError):
        greedy_route(PlacementPlan(1, {}, {0: GIB}), [gb_table(0, 1)], [0])


def test_routing_roundtrip_and_load():
    plan = greedy_allocate(TABLES_1K[:100], MNS_8, 2)
    r = greedy_route(plan, TABLES_1K[:100], [0, 1])
    assert RoutingTable.from_dict(r.to_dict()) == r
    assert r.recompute_load(TABLES_1K[:100]) == pytest.approx(r.routed_load)


# -- random baseline ---------------------------------------------------

def test_random_full_replication_matches_greedy():
    tables = TABLES_1K[:20]
    mns = {i: TIB for i in range(3)}
    rplan, _ = random_allocate_route(tables, mns, 3, seed=5)
    assert rplan.assignments == greedy_allocate(tables, mns, 3).assignments


def test_random_reproducible():
    a = random_allocate_route(TABLES_1K, MNS_8, 2, seed=11)
    b = random_allocate_route(TABLES_1K, MNS_8, 2, seed=11)
    assert a == b


def test_random_less_balanced_than_greedy():
    wins = 0
    for seed in range(100):
        tables = synth_tables(1.4 * TIB, 1000, seed=seed)
        greedy = greedy_route(greedy_allocate(tables, MNS_8, 2), tables, [0]).recompute_load(tables, MNS_8)
        _, rr = random_allocate_route(tables, MNS_8, 2, seed)
        wins += coefficient_of_variation(rr.recompute_load(tables, MNS_8).values()) > \
            coefficient_of_variation(greedy.values())
    assert wins >= 95


# -- rebalance ---------------------------------------------------------

def test_rebalance_two_replicas_covers_everything():
    tables = TABLES_1K[:200]
    plan = greedy_allocate(tables, MNS_8, 2)
    routing = greedy_route(plan, tables, [0, 1])
    out = rebalance_after_mn_failure(plan, routing, 3, tables)
    assert isinstance(out, RoutingTable)
    assert 3 not in out.destinations()
    assert sorted((t, tb) for t, tb, _ in out.entries) == sorted((t, tb) for t, tb, _ in routing.entries)


def test_rebalance_single_replica_needs_reinit():
    tables = TABLES_1K[:50]
    plan = greedy_allocate(tables, MNS_8, 1)
    victim = next(m for m in MNS_8 if plan.tables_on(m))
    out = rebalance_after_mn_failure(plan, greedy_route(plan, tables, [0]), victim, tables)
    assert isinstance(out, ReinitRequired) and victim in out.failed_mns and out.lost_tables


def test_rebalance_unrouted_mn_equals_fresh_route():
    tables = [gb_table(0, 1), gb_table(1, 1)]
    # MN 2 hosts nothing
    plan = PlacementPlan(2, {0: (0, 1), 1: (0, 1)}, {0: 2 * GIB, 1: 2 * GIB, 2: 4 * GIB})
    routing = greedy_route(plan, tables, [0])
    out = rebalance_after_mn_failure(plan, routing, 2, tables)
    assert out == greedy_route(plan, tables, [0], exclude={2})


# -- properties --------------------------------------------------------

cases = st.tuples(
    st.integers(1, 60),           # tables
    st.integers(1, 10),           # MNs
    st.integers(0, 10_000),       # seed
    st.integers(1, 4),            # tasks
)


@given(cases)
def test_placement_properties(case):
    n_tables, n_mns, seed, n_tasks = case
    tables = synth_tables(64 * GIB, n_tables, seed=seed)
    mns = {m: 100 * GIB for m in range(n_mns)}
    try:
        plan = place(tables, mns)
    except (CapacityError, PlacementError):
        return
    check_plan(plan, tables, mns)
    used = {m: 0 for m in mns}
    for tid, reps in plan.assignments.items():
        assert len(reps) == len(set(reps)) == plan.n_replicas
        for m in reps:
            used[m] += tables[tid].size_bytes
    assert all(used[m] <= mns[m] for m in mns)
    routing = greedy_route(plan, tables, list(range(n_tasks)))
    assert plan == place(tables, mns)
    load = routing.recompute_load(tables, mns)
    if plan.n_replicas == n_mns:
        assert max(load.values()) - min(load.values()) <= max(t.access_weight for t in tables) + 1e-9
    pairs = [(t, tb) for t, tb, _ in routing.entries]
    assert len(pairs) == len(set(pairs)) == n_tables * n_tasks
    if plan.n_replicas >= 2:
        out = rebalance_after_mn_failure(plan, routing, 0, tables)
        assert isinstance(out, RoutingTable)
        assert 0 not in out.destinations()
        assert sorted((t, tb) for t, tb, _ in out.entries) == sorted(pairs)
        for _, tb, mn in out.entries:
            assert mn in plan.assignments[tb]
