from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disaggsim.catalog import GIB, Deployment, ServingUnitConfig, build_default_catalog, default_nodes
from disaggsim.errors import ConfigError
from disaggsim.model import EmbeddingTable, ModelSpec, synth_tables
from disaggsim.perfmodel import PerfParams
from disaggsim.simcore import (
    HillClimbResult,
    SimResult,
    default_rate_grid,
    hill_climb_qps,
    is_feasible,
    p95,
    run,
    saturation_trace,
)
from disaggsim.unit import build_unit
from disaggsim.workload import LoadCurve, Query, gen_trace

NODES = default_nodes(build_default_catalog())
TABLE = EmbeddingTable(0, 1 << 20, 64, 80.0)
LINK_BPUS = 0.5 * GIB / 1e6  # bytes per microsecond on the unit link


def small_unit(scheduler: str = "sequential", m_mns: int = 1, tables=(TABLE,)):
    cn, mn = NODES["cn_1gpu"], NODES["ddr_mn"]
    model = ModelSpec("t", tuple(tables), 0.008, 0.4 * cn.preprocess_cores)
    cfg = ServingUnitConfig(cn, 1, mn, m_mns, Deployment.DISAGGREGATED, intra_unit_bandwidth_gibps=0.5)
    return build_unit(model, cfg, scheduler, PerfParams(per_message_latency_us=100.0))


def hand_stages(batch: int) -> dict[str, float]:
    return {
        "preprocess": 0.4 * batch,
        "scatter": 100.0 + batch * 80 * 4 / LINK_BPUS,
        "sparse": batch * 80 * 64 * 4 / (145 * GIB / 1e6),
        "gather": 100.0 + batch * 64 * 4 / LINK_BPUS,
        "dense": batch * 0.008e9 / 20e12 * 1e6,
    }


@pytest.mark.parametrize("scheduler", ["sequential", "interleaved"])
def test_single_query_latency_is_stage_sum(scheduler):
    res = run(small_unit(scheduler), [Query(0, 0.0, 128)], max_batch=128)
    assert res.per_query_latency_us == [pytest.approx(sum(hand_stages(128).values()), rel=1e-12)]
    assert res.n_completed == 1 and res.query_ids == [0]


def test_second_query_waits_on_bottleneck_stage():
    # both arrive together; the second trails by the slowest stage (scatter)
    res = run(small_unit(), [Query(0, 0.0, 128), Query(1, 0.0, 128)], max_batch=128)
    first, second = res.per_query_latency_us
    s = hand_stages(128)
    assert first == pytest.approx(sum(s.values()))
    assert second == pytest.approx(first + s["scatter"])


def test_overload_latency_grows_with_trace_length():
    unit = small_unit()
    cap = unit.capacity_qps(128, 128)
    short = run(small_unit(), gen_trace(LoadCurve.constant(2 * cap, 200 / (2 * cap)), seed=1), max_batch=128)
    long = run(small_unit(), gen_trace(LoadCurve.constant(2 * cap, 800 / (2 * cap)), seed=1), max_batch=128)
    assert long.p95_latency_us > 2 * short.p95_latency_us
    assert not is_feasible(long, math.inf)


def test_schedulers_agree_on_single_query_with_one_mn():
    seq = run(small_unit("sequential"), [Query(0, 0.0, 100)], max_batch=128)
    inter = run(small_unit("interleaved"), [Query(0, 0.0, 100)], max_batch=128)
    assert seq.per_query_latency_us == pytest.approx(inter.per_query_latency_us)


def shard_order(res: SimResult) -> list[int]:
    return [row[3] for row in sorted(res.event_log, key=lambda r: (r[0], r[1])) if row[2] == "shard_done"]


def test_sequential_batches_do_not_overlap_on_mns():
    tables = synth_tables(64 * GIB, 40, seed=2)
    res = run(small_unit("sequential", 4, tables), saturation_trace(30, 128), max_batch=128, record_events=True)
    order = shard_order(res)
    # every shard of a batch finishes before any shard of a later batch
    groups = [order[0]]
    for b in order[1:]:
        if b != groups[-1]:
            assert b not in groups
            groups.append(b)
    assert len(groups) == 30


def test_saturation_mn_work_is_scheduler_independent():
    tables = synth_tables(64 * GIB, 40, seed=2)
    busy = {}
    for s in ("sequential", "interleaved"):
        res = run(small_unit(s, 4, tables), saturation_trace(50, 128), max_batch=128)
        busy[s] = {k: v for k, v in res.busy_us.items() if k.startswith("mn")}
    assert busy["sequential"].keys() == busy["interleaved"].keys()
    for k in busy["sequential"]:
        assert busy["sequential"][k] == pytest.approx(busy["interleaved"][k], rel=1e-9)


def test_event_log_is_deterministic_and_causal():
    trace = gen_trace(LoadCurve.constant(300, 1.0), seed=3)
    a = run(small_unit("interleaved", 2, synth_tables(8 * GIB, 10, seed=1)), trace, max_batch=64,
            record_events=True)
    b = run(small_unit("interleaved", 2, synth_tables(8 * GIB, 10, seed=1)), trace, max_batch=64,
            record_events=True)
    assert a.event_log_csv() == b.event_log_csv()
    times = [row[0] for row in a.event_log]
    assert times == sorted(times)
    seen: dict[int, list[tuple[str, object]]] = {}
    for row in a.event_log:
        seen.setdefault(row[3], []).append((row[2], row[4]))
    for events in seen.values():
        kinds = [k for k, _ in events]
        if "dense_done" not in kinds:
            continue
        # a shard runs after its own scatter; gather follows every shard
        for i, (k, mn) in enumerate(events):
            if k == "shard_done":
                assert ("scatter_done", mn) in events[:i]
        g = kinds.index("gather_done")
        assert "shard_done" not in kinds[g:] and kinds.index("dense_done") > g
        assert kinds.index("preprocess_done") < kinds.index("scatter_done")


def test_max_batch_validation():
    with pytest.raises(ConfigError):
        run(small_unit(), [], max_batch=0)


def test_empty_trace():
    res = run(small_unit(), [], max_batch=8)
    assert res.n_queries == 0 and res.per_query_latency_us == []
    assert not is_feasible(res, math.inf)


def test_p95_nearest_rank():
    assert p95(list(range(1, 101))) == 95
    assert p95([5.0]) == 5.0
    assert p95([]) == math.inf


def test_default_rate_grid():
    g = default_rate_grid(1000.0)
    assert len(g) == 40
    assert g[0] == pytest.approx(20.0) and g[-1] == pytest.approx(1200.0)
    assert g == sorted(g)


def fake_result(p95_us: float, offered: float, sustained: float, done: int = 10, n: int = 10) -> SimResult:
    return SimResult([1.0] * done, p95_us, sustained, offered, {}, 0.0, 0.0, 1.0, n, done,
                     sustained_qps=sustained)


def test_is_feasible_rules():
    assert is_feasible(fake_result(10, 100, 100), 10)
    assert not is_feasible(fake_result(11, 100, 100), 10)
    assert not is_feasible(fake_result(10, 100, 94), 10)
    assert is_feasible(fake_result(10, 100, 95), 10)
    assert not is_feasible(fake_result(1, 100, 100, done=9), 10)


def stub_probe(capacity: dict[int, float]):
    calls = []

    def probe(batch: int, rate: float) -> SimResult:
        calls.append((batch, rate))
        ok = rate <= capacity[batch]
        return fake_result(1.0, rate, rate if ok else 0.5 * rate)
    return probe, calls


def test_hill_climb_finds_grid_maximum_and_stops_on_plateau():
    grid = [float(r) for r in range(10, 1001, 10)]
    probe, calls = stub_probe({16: 95, 32: 400, 64: 402, 128: 900})
    out = hill_climb_qps(probe, math.inf, [128, 16, 32, 64], grid)
    assert out.qps_by_batch == {16: 90.0, 32: 400.0, 64: 400.0}
    assert (out.best_batch, out.best_qps) == (32, 400.0)
    assert all(b != 128 for b, _ in calls)
    # binary search: about log2(100) probes per batch size
    assert len(calls) <= 3 * 9


def test_hill_climb_reports_infeasible():
    probe, _ = stub_probe({8: 0.0})
    out = hill_climb_qps(probe, 5.0, [8], [1.0, 2.0])
    assert isinstance(out, HillClimbResult)
    assert out.best_qps == 0.0 and out.best_batch is None and "no batch size" in out.diagnostic
    with pytest.raises(ConfigError):
        hill_climb_qps(probe, 5.0, [], [1.0])


def test_energy_accounting():
    res = run(small_unit(), saturation_trace(20, 128), max_batch=128)
    assert res.energy_joules == pytest.approx(res.avg_power_w * res.horizon_us / 1e6)
    assert all(0.0 <= f <= 1.0 for f in res.busy_fractions.values())


@settings(max_examples=25)
@given(
    arrivals=st.lists(st.tuples(st.floats(0, 50_000), st.integers(1, 300)), min_size=1, max_size=25),
    scheduler=st.sampled_from(["sequential", "interleaved"]),
    max_batch=st.sampled_from([16, 64, 256]),
)
def test_all_queries_complete_and_pay_message_costs(arrivals, scheduler, max_batch):
    trace = [Query(i, t, n) for i, (t, n) in enumerate(sorted(arrivals))]
    res = run(small_unit(scheduler), trace, max_batch=max_batch)
    assert res.n_completed == len(trace)
    assert sorted(res.query_ids) == list(range(len(trace)))
    # scatter and gather each pay a 100 us message cost
    assert min(res.per_query_latency_us) >= 200.0
