"""Failure injection and recovery orchestration for serving units."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Union

import numpy as np

from disaggsim.catalog import Deployment, FailureClass, NodeConfig
from disaggsim.errors import ConfigError, SimulationInvariantError
from disaggsim.placement import (
    PlacementPlan,
    ReinitRequired,
    RoutingTable,
    compute_n_replicas,
    greedy_allocate,
    greedy_route,
    rebalance_after_mn_failure,
)
from disaggsim.unit import MemoryRole, ServingUnitState

US_PER_S = 1_000_000
DAY_S = 86_400.0

# daily per-node failure probabilities
GPU_DAILY_RATE = 0.07
CPU_DAILY_RATE = 0.004
MN_DAILY_RATE = 0.0004
# the CPU-server figure, also usable for MNs (the two sources differ by 10x)
MN_DAILY_RATE_CPU_SERVER = 0.004

ROUTING_UPDATE_DELAY_S = 5.0


class RecoveryModel(str, Enum):
    MIGRATE_TASK = "migrate_task"
    REROUTE_OR_REINIT = "reroute_or_reinit"
    WHOLE_SERVER = "whole_server"


@dataclass(frozen=True)
class FailureProfile:
    daily_fail_prob: float
    recovery_model: RecoveryModel = RecoveryModel.MIGRATE_TASK
    migrate_delay_s: float = 30.0
    reinit_delay_s: float = 600.0
    routing_update_delay_s: float = ROUTING_UPDATE_DELAY_S

    def __post_init__(self) -> None:
        object.__setattr__(self, "recovery_model", RecoveryModel(self.recovery_model))
        if not 0.0 <= self.daily_fail_prob <= 1.0:
            raise ConfigError(f"daily_fail_prob {self.daily_fail_prob} outside [0, 1]")
        if min(self.migrate_delay_s, self.reinit_delay_s, self.routing_update_delay_s) < 0:
            raise ConfigError("recovery delays must be >= 0")

    @property
    def recovery_delay_s(self) -> float:
        """How long the node itself stays down."""
        if self.recovery_model is RecoveryModel.REROUTE_OR_REINIT:
            return self.reinit_delay_s
        return self.migrate_delay_s


def default_rates(mn_rate: float = MN_DAILY_RATE) -> dict[FailureClass, float]:
    return {FailureClass.GPU: GPU_DAILY_RATE, FailureClass.CPU: CPU_DAILY_RATE, FailureClass.MN: mn_rate}


def profile_for(node: NodeConfig, deployment: Deployment, rates: Mapping[FailureClass, float] | None = None,
                **delays: float) -> FailureProfile:
    rates = rates or default_rates()
    prob = rates[node.failure_class]
    if deployment.is_monolithic:
        return FailureProfile(prob, RecoveryModel.WHOLE_SERVER, **delays)
    if node.failure_class is FailureClass.MN:
        return FailureProfile(prob, RecoveryModel.REROUTE_OR_REINIT, **delays)
    return FailureProfile(prob, RecoveryModel.MIGRATE_TASK, **delays)


def unit_profiles(state: ServingUnitState, rates: Mapping[FailureClass, float] | None = None,
                  **delays: float) -> dict[str, FailureProfile]:
    """A profile for every node slot of a simulated unit."""
    cfg = state.config
    out = {}
    for node_id, (tasks, _mns) in sorted(state.nodes().items()):
        node = cfg.cn if tasks else cfg.mn
        out[node_id] = profile_for(node, cfg.deployment, rates, **delays)
    return out


@dataclass(frozen=True)
class FailureEvent:
    time_us: float
    node_id: str
    kind: str  # "fail" | "recover"


@dataclass
class FailureTrace:
    events: list[FailureEvent]

    def __post_init__(self) -> None:
        self.events = sorted(self.events, key=lambda e: (e.time_us, e.node_id, e.kind != "fail"))
        last: dict[str, str] = {}
        for e in self.events:
            if e.kind not in ("fail", "recover"):
                raise ConfigError(f"unknown failure event kind {e.kind!r}")
            expected = "recover" if last.get(e.node_id) == "fail" else "fail"
            if e.kind != expected:
                raise ConfigError(f"node {e.node_id}: fail/recover must alternate")
            last[e.node_id] = e.kind

    def __len__(self) -> int:
        return len(self.events)

    def fail_count(self) -> int:
        return sum(e.kind == "fail" for e in self.events)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_us", "node_id", "kind"])
        for e in self.events:
            w.writerow([repr(e.time_us), e.node_id, e.kind])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> FailureTrace:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["time_us", "node_id", "kind"]:
            raise ConfigError(f"unexpected failure trace header {reader.fieldnames}")
        return cls([FailureEvent(float(r["time_us"]), r["node_id"], r["kind"]) for r in reader])


def gen_failure_trace(nodes: Mapping[str, FailureProfile], horizon_days: int, seed: int = 0) -> FailureTrace:
    """Daily Bernoulli failures at a uniform instant, each followed by recovery.

    Every node draws from its own stream keyed by ``seed`` and its id, so a
    node's failures do not depend on which other nodes exist. A node that is
    still down when its next draw would fire is skipped for that draw.
    """
    day_us = DAY_S * US_PER_S
    events: list[FailureEvent] = []
    for node_id in sorted(nodes):
        prof = nodes[node_id]
        rng = np.random.default_rng([seed, zlib.crc32(node_id.encode())])
        draws = rng.random((horizon_days, 2))
        up_at = 0.0
        for day, (u, offset) in enumerate(draws):
            if u >= prof.daily_fail_prob:
                continue
            t = float((day + offset) * day_us)
            if t < up_at:
                continue
            back = t + prof.recovery_delay_s * US_PER_S
            events.append(FailureEvent(t, node_id, "fail"))
            events.append(FailureEvent(back, node_id, "recover"))
            up_at = back
    return FailureTrace(events)


# recovery actions; ``delay_us`` is measured from the failure instant

@dataclass(frozen=True)
class MigrateTask:
    node_id: str
    task_ids: tuple[int, ...]
    delay_us: float


@dataclass(frozen=True)
class Reroute:
    node_id: str
    failed_mns: tuple[int, ...]
    routing: RoutingTable
    delay_us: float


@dataclass(frozen=True)
class Reinit:
    node_id: str
    failed_mns: tuple[int, ...]
    backups: tuple[MemoryRole, ...]
    placement: PlacementPlan
    routing: RoutingTable
    delay_us: float


@dataclass(frozen=True)
class ReplaceServer:
    node_id: str
    task_ids: tuple[int, ...]
    mn_ids: tuple[int, ...]
    delay_us: float


RecoveryAction = Union[MigrateTask, Reroute, Reinit, ReplaceServer]


def _reinit(state: ServingUnitState, node_id: str, dead: set[int], delay_us: float) -> Reinit:
    template = state.mns[min(dead)]
    next_id = max(state.mns) + 1
    backups: list[MemoryRole] = []
    tables = state.model.tables
    while True:
        caps = {m: r.capacity_bytes for m, r in state.mns.items() if m not in dead}
        caps.update({b.mn_id: b.capacity_bytes for b in backups})
        need = sum(t.size_bytes for t in tables)
        if caps and sum(caps.values()) >= need:
            break
        backups.append(MemoryRole(next_id, f"backup{next_id}", template.capacity_bytes,
                                  template.bandwidth_gibps, template.power_w))
        next_id += 1
    if not backups:
        # replicas were lost although capacity survives: still bring in one backup
        backups.append(MemoryRole(next_id, f"backup{next_id}", template.capacity_bytes,
                                  template.bandwidth_gibps, template.power_w))
        caps[next_id] = template.capacity_bytes
    plan = greedy_allocate(tables, caps, compute_n_replicas(tables, caps))
    routing = greedy_route(plan, tables, state.task_ids)
    return Reinit(node_id, tuple(sorted(dead)), tuple(backups), plan, routing, delay_us)


def apply_failure(state: ServingUnitState, node_id: str, profile: FailureProfile | None = None) -> RecoveryAction:
    """Recovery action for a failure of ``node_id``. Does not mutate ``state``."""
    nodes = state.nodes()
    if node_id not in nodes:
        raise ConfigError(f"unknown node {node_id!r}")
    tasks, mns = nodes[node_id]
    profile = profile or FailureProfile(0.0)
    if state.config.deployment.is_monolithic:
        return ReplaceServer(node_id, tuple(tasks), tuple(mns), profile.migrate_delay_s * US_PER_S)
    if tasks:
        return MigrateTask(node_id, tuple(tasks), profile.migrate_delay_s * US_PER_S)
    already = set(state.dead_mns)
    result = None
    for mn in mns:
        result = rebalance_after_mn_failure(state.placement, state.routing, mn, state.model.tables, already)
        already.add(mn)
        if isinstance(result, ReinitRequired):
            break
    if isinstance(result, ReinitRequired):
        return _reinit(state, node_id, already, profile.reinit_delay_s * US_PER_S)
    return Reroute(node_id, tuple(sorted(mns)), result, profile.routing_update_delay_s * US_PER_S)


def fail_now(state: ServingUnitState, action: RecoveryAction) -> None:
    """State change at the failure instant."""
    if isinstance(action, (MigrateTask, ReplaceServer)):
        state.down_tasks.update(action.task_ids)
    if isinstance(action, ReplaceServer):
        state.dead_mns.update(action.mn_ids)
    if isinstance(action, (Reroute, Reinit)):
        state.dead_mns.update(action.failed_mns)


def complete(state: ServingUnitState, action: RecoveryAction) -> None:
    """State change once the recovery delay has elapsed."""
    if isinstance(action, (MigrateTask, ReplaceServer)):
        state.down_tasks.difference_update(action.task_ids)
    if isinstance(action, ReplaceServer):
        # the replacement server reloads the same shard; routing is unchanged
        state.dead_mns.difference_update(action.mn_ids)
    elif isinstance(action, Reroute):
        state.routing = action.routing
    elif isinstance(action, Reinit):
        for b in action.backups:
            state.mns[b.mn_id] = b
        for m in action.failed_mns:
            state.mns.pop(m, None)
        state.dead_mns.difference_update(action.failed_mns)
        state.backups_added += len(action.backups)
        state.placement = action.placement
        state.routing = action.routing
    if state.routing.destinations() & state.dead_mns:
        # another MN died while this action was pending
        state.routing = greedy_route(state.placement, state.model.tables, state.task_ids,
                                     exclude=state.dead_mns)


def check_routing_live(state: ServingUnitState) -> None:
    dead = state.routing.destinations() & state.dead_mns | (state.routing.destinations() - set(state.mns))
    if dead:
        raise SimulationInvariantError(f"routing references dead MNs {sorted(dead)}")
