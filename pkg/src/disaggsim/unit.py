"""Serving-unit topology: which tasks, memory roles and nodes exist, and the
placement/routing currently in force."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from disaggsim.catalog import (
    Catalog,
    Deployment,
    DeviceKind,
    NodeConfig,
    ServingUnitConfig,
    build_default_catalog,
    power_by_kind,
)
from disaggsim.errors import CapacityError, PlacementError
from disaggsim.model import EmbeddingTable, ModelSpec
from disaggsim.perfmodel import (
    LinkModel,
    PerfParams,
    bytes_to_us,
    embedding_bytes_per_sample,
    fsum_bytes_per_sample,
    index_bytes_per_sample,
    naive_numa_effective_bw,
)
from disaggsim.placement import PlacementPlan, RoutingTable, greedy_allocate, greedy_route, compute_n_replicas


class Scheduler(str, Enum):
    INTERLEAVED = "interleaved"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class Task:
    task_id: int
    node_id: str
    preprocess_cores: int
    n_gpus: int
    colocated_mn: int | None
    cpu_power_w: float
    gpu_power_w: float
    nic_power_w: float


@dataclass(frozen=True)
class MemoryRole:
    mn_id: int
    node_id: str
    capacity_bytes: int
    bandwidth_gibps: float
    power_w: float


@dataclass(frozen=True)
class Packet:
    """Per-sample work one task sends to one memory role."""

    emb_bytes: float
    idx_bytes: float
    fsum_bytes: float


@dataclass
class ServingUnitState:
    config: ServingUnitConfig
    model: ModelSpec
    tasks: list[Task]
    mns: dict[int, MemoryRole]
    placement: PlacementPlan
    routing: RoutingTable
    scheduler: Scheduler = Scheduler.SEQUENTIAL
    perf: PerfParams = field(default_factory=PerfParams)
    catalog: Mapping = field(default_factory=build_default_catalog)
    dead_mns: set[int] = field(default_factory=set)
    down_tasks: set[int] = field(default_factory=set)
    backups_added: int = 0
    local_only: bool = False

    def __post_init__(self) -> None:
        self.scheduler = Scheduler(self.scheduler)
        self._packet_cache: dict[int, tuple[RoutingTable, dict[int, Packet]]] = {}

    @property
    def link(self) -> LinkModel:
        latency = (self.perf.upi_latency_us if self.config.deployment.is_scale_up
                   else self.perf.per_message_latency_us)
        return LinkModel(self.config.intra_unit_bandwidth_gibps, latency)

    @property
    def task_ids(self) -> list[int]:
        return [t.task_id for t in self.tasks]

    def nodes(self) -> dict[str, tuple[list[int], list[int]]]:
        """node_id -> (task ids, memory role ids) hosted on it."""
        out: dict[str, tuple[list[int], list[int]]] = {}
        for t in self.tasks:
            out.setdefault(t.node_id, ([], []))[0].append(t.task_id)
        for m in self.mns.values():
            out.setdefault(m.node_id, ([], []))[1].append(m.mn_id)
        return out

    def mn_capacities(self, include_dead: bool = False) -> dict[int, int]:
        return {m: r.capacity_bytes for m, r in self.mns.items()
                if include_dead or m not in self.dead_mns}

    def packets(self, task_id: int) -> dict[int, Packet]:
        """Per-MN packet sizes for ``task_id`` under the current routing."""
        hit = self._packet_cache.get(task_id)
        if hit is not None and hit[0] is self.routing:
            return hit[1]
        tables = {t.table_id: t for t in self.model.tables}
        if self.local_only:
            own = self.tasks[task_id].colocated_mn
            grouped = {own: list(self.model.tables)}
        else:
            grouped: dict[int, list[EmbeddingTable]] = {}
            for task, table, mn in self.routing.entries:
                if task == task_id:
                    grouped.setdefault(mn, []).append(tables[table])
        out = {
            mn: Packet(
                embedding_bytes_per_sample(ts),
                index_bytes_per_sample(ts, self.perf.index_bytes),
                fsum_bytes_per_sample(ts, self.perf.fsum_bytes),
            )
            for mn, ts in sorted(grouped.items())
        }
        self._packet_cache[task_id] = (self.routing, out)
        return out

    def mn_bandwidth(self, mn: int) -> float:
        if self.local_only:
            return naive_numa_effective_bw(self.perf)
        return self.mns[mn].bandwidth_gibps

    def snapshot(self) -> ServingUnitState:
        """Deep copy for diffing before/after a failure action."""
        clone = copy.copy(self)
        clone.tasks = list(self.tasks)
        clone.mns = dict(self.mns)
        clone.placement = copy.deepcopy(self.placement)
        clone.routing = copy.deepcopy(self.routing)
        clone.dead_mns = set(self.dead_mns)
        clone.down_tasks = set(self.down_tasks)
        clone._packet_cache = {}
        return clone

    def per_sample_costs(self, batch: int) -> dict[str, float]:
        """Steady-state microseconds of work per sample on each resource."""
        n = len(self.tasks)
        out: dict[str, float] = {}
        link = self.link
        for t in self.tasks:
            pk = self.packets(t.task_id)
            remote = {mn: p for mn, p in pk.items() if mn != t.colocated_mn}
            out[f"task{t.task_id}.cpu"] = self.model.preprocess_cost_us_per_sample / t.preprocess_cores
            out[f"task{t.task_id}.gpu"] = (self.model.dense_gflops_per_sample * 1e9
                                           / (self.perf.gpu_effective_tflops * 1e12) * 1e6 / t.n_gpus)
            out[f"task{t.task_id}.tx"] = sum(bytes_to_us(p.idx_bytes, link.bandwidth_gibps)
                                            + link.per_message_latency_us / batch for p in remote.values())
            out[f"task{t.task_id}.rx"] = sum(bytes_to_us(p.fsum_bytes, link.bandwidth_gibps)
                                            + link.per_message_latency_us / batch for p in remote.values())
        for mn in self.mns:
            if mn in self.dead_mns:
                continue
            load = sum(self.packets(t.task_id).get(mn, Packet(0, 0, 0)).emb_bytes for t in self.tasks) / n
            out[f"mn{mn}"] = bytes_to_us(load, self.mn_bandwidth(mn))
        # per-task resources only see 1/n of the samples
        return {k: (v / n if k.startswith("task") else v) for k, v in out.items()}

    def capacity_qps(self, batch: int, mean_query_samples: float) -> float:
        """Analytic saturation throughput in queries per second."""
        worst = max(self.per_sample_costs(batch).values())
        return 1e6 / worst / mean_query_samples if worst > 0 else float("inf")


def _node_power(node: NodeConfig, catalog: Catalog) -> dict[DeviceKind, float]:
    return power_by_kind(node, catalog)


def build_roles(config: ServingUnitConfig, catalog: Catalog) -> tuple[list[Task], dict[int, MemoryRole]]:
    dep = config.deployment
    tasks: list[Task] = []
    mns: dict[int, MemoryRole] = {}
    if dep is Deployment.DISAGGREGATED:
        cp = _node_power(config.cn, catalog)
        mp = sum(_node_power(config.mn, catalog).values())
        for i in range(config.n_cns):
            tasks.append(Task(
                i, f"cn{i}", config.cn.preprocess_cores, max(config.cn.n_gpus, 1), None,
                cpu_power_w=cp.get(DeviceKind.CPU, 0) + cp.get(DeviceKind.DIMM, 0),
                gpu_power_w=cp.get(DeviceKind.GPU, 0) / max(config.cn.n_gpus, 1),
                nic_power_w=cp.get(DeviceKind.NIC, 0),
            ))
        for j in range(config.m_mns):
            mns[j] = MemoryRole(j, f"mn{j}", config.mn.memory_capacity_bytes,
                                config.mn.local_mem_bandwidth_gibps, mp)
        return tasks, mns

    server = config.cn
    pw = _node_power(server, catalog)
    sockets = server.n_sockets
    mem_power = (pw.get(DeviceKind.DIMM, 0) + pw.get(DeviceKind.NMP_DIMM, 0)) / sockets
    for k in range(config.n_cns):
        for s in range(sockets):
            idx = k * sockets + s
            tasks.append(Task(
                idx, f"srv{k}", server.preprocess_cores, max(server.n_gpus // sockets, 1), idx,
                cpu_power_w=pw.get(DeviceKind.CPU, 0) / sockets,
                gpu_power_w=pw.get(DeviceKind.GPU, 0) / max(server.n_gpus, 1),
                nic_power_w=pw.get(DeviceKind.NIC, 0) / sockets,
            ))
            mns[idx] = MemoryRole(idx, f"srv{k}", server.memory_capacity_bytes // sockets,
                                  server.local_mem_bandwidth_gibps, mem_power)
    return tasks, mns


def _allocate_with_fallback(model: ModelSpec, caps: dict[int, int], n_replicas: int) -> PlacementPlan:
    """Greedy packing can miss a replica count that fits on raw capacity; step down."""
    for r in range(n_replicas, 0, -1):
        try:
            return greedy_allocate(model.tables, caps, r)
        except PlacementError:
            if r == 1:
                raise
    raise AssertionError("unreachable")


def build_unit(model: ModelSpec, config: ServingUnitConfig, scheduler: Scheduler | str = Scheduler.SEQUENTIAL,
               perf: PerfParams | None = None, catalog: Catalog | None = None,
               n_replicas: int | None = None) -> ServingUnitState:
    """Roles, greedy placement and greedy routing for one serving unit.

    Raises :class:`CapacityError` when the memory roles cannot hold the model.
    """
    catalog = catalog if catalog is not None else build_default_catalog()
    perf = perf or PerfParams()
    tasks, mns = build_roles(config, catalog)
    caps = {m: r.capacity_bytes for m, r in mns.items()}
    local_only = config.deployment is Deployment.SCALE_UP_NAIVE
    if local_only:
        # embeddings interleaved across both sockets; capacity is pooled
        need = model.total_sparse_bytes
        if need > sum(caps.values()):
            raise CapacityError(f"model needs {need} bytes, server holds {sum(caps.values())}")
    if n_replicas is None:
        n_replicas = compute_n_replicas(model.tables, caps)
    if local_only:
        plan = PlacementPlan(1, {t.table_id: (t.table_id % len(caps),) for t in model.tables},
                             dict(caps))
        routing = RoutingTable([(task.task_id, t.table_id, task.colocated_mn)
                                for t in model.tables for task in tasks])
    else:
        plan = _allocate_with_fallback(model, caps, n_replicas)
        routing = greedy_route(plan, model.tables, [t.task_id for t in tasks])
    return ServingUnitState(config, model, tasks, mns, plan, routing, Scheduler(scheduler),
                            perf, catalog, local_only=local_only)


def routed_tables(state: ServingUnitState, task_id: int) -> dict[int, list[EmbeddingTable]]:
    tables = {t.table_id: t for t in state.model.tables}
    out: dict[int, list[EmbeddingTable]] = {}
    for task, table, mn in state.routing.entries:
        if task == task_id:
            out.setdefault(mn, []).append(tables[table])
    return out


def unit_tables(state: ServingUnitState) -> Sequence[EmbeddingTable]:
    return state.model.tables
