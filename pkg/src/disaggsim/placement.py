"""Embedding table placement and MemAccess routing across memory nodes.

Memory nodes are identified by small integers; ``mns`` arguments map each
id to its capacity in bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from disaggsim.errors import CapacityError, PlacementError, RoutingError
from disaggsim.model import EmbeddingTable


@dataclass
class PlacementPlan:
    n_replicas: int
    assignments: dict[int, tuple[int, ...]]
    residual_capacity: dict[int, int]

    def mn_ids(self) -> list[int]:
        return sorted(self.residual_capacity)

    def placed_bytes(self, tables: Sequence[EmbeddingTable]) -> dict[int, int]:
        out = {mn: 0 for mn in self.residual_capacity}
        sizes = {t.table_id: t.size_bytes for t in tables}
        for tid, mns in self.assignments.items():
            for mn in mns:
                out[mn] += sizes[tid]
        return out

    def tables_on(self, mn: int) -> list[int]:
        return sorted(t for t, mns in self.assignments.items() if mn in mns)

    def to_dict(self) -> dict:
        return {
            "n_replicas": self.n_replicas,
            "assignments": {str(t): list(m) for t, m in sorted(self.assignments.items())},
            "residual_capacity": {str(m): c for m, c in sorted(self.residual_capacity.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> PlacementPlan:
        return cls(
            int(data["n_replicas"]),
            {int(t): tuple(m) for t, m in data["assignments"].items()},
            {int(m): int(c) for m, c in data["residual_capacity"].items()},
        )


@dataclass
class RoutingTable:
    entries: list[tuple[int, int, int]]
    routed_load: dict[int, float] = field(default_factory=dict)

    def lookup(self) -> dict[tuple[int, int], int]:
        return {(task, table): mn for task, table, mn in self.entries}

    def destinations(self) -> set[int]:
        return {mn for _, _, mn in self.entries}

    def recompute_load(self, tables: Sequence[EmbeddingTable], mn_ids: Iterable[int] = ()) -> dict[int, float]:
        weight = {t.table_id: t.access_weight for t in tables}
        load = {mn: 0.0 for mn in mn_ids}
        for _, table, mn in self.entries:
            load[mn] = load.get(mn, 0.0) + weight[table]
        return load

    def digest(self) -> str:
        return json.dumps(sorted(self.entries))

    def to_dict(self) -> dict:
        return {
            "entries": [list(e) for e in self.entries],
            "routed_load": {str(m): v for m, v in sorted(self.routed_load.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> RoutingTable:
        return cls([tuple(e) for e in data["entries"]],
                   {int(m): float(v) for m, v in data["routed_load"].items()})


@dataclass(frozen=True)
class ReinitRequired:
    """Every replica of ``lost_tables`` is gone; backups must be added and
    placement re-run."""

    failed_mns: tuple[int, ...]
    lost_tables: tuple[int, ...]


def compute_n_replicas(tables: Sequence[EmbeddingTable], mns: Mapping[int, int]) -> int:
    need = sum(t.size_bytes for t in tables)
    have = sum(mns.values())
    if need > have:
        raise CapacityError(
            f"model needs {need} bytes but {len(mns)} MNs hold {have} "
            f"(shortfall {need - have} bytes)"
        )
    if need == 0:
        return len(mns)
    return max(1, min(len(mns), have // need))


def _table_order(tables: Sequence[EmbeddingTable]) -> list[EmbeddingTable]:
    return sorted(tables, key=lambda t: (-t.size_bytes, t.table_id))


def greedy_allocate(tables: Sequence[EmbeddingTable], mns: Mapping[int, int], n_replicas: int) -> PlacementPlan:
    """Place each table (largest first) on the ``n_replicas`` MNs with the most free space.

    Replicas are picked one at a time. MNs whose free space is within one
    table size of the best are treated as capacity-equivalent; among those the
    one sharing the fewest tables with the replicas already picked wins, then
    the one with most free space, then the lowest id. Without the overlap term
    equal-capacity MNs lock into fixed replica groups and routing can no
    longer move load between groups.
    """
    if not 1 <= n_replicas <= len(mns):
        raise PlacementError(f"n_replicas={n_replicas} needs 1..{len(mns)} MNs")
    residual = {int(m): int(c) for m, c in mns.items()}
    shared: dict[tuple[int, int], int] = {}
    assignments: dict[int, tuple[int, ...]] = {}
    for t in _table_order(tables):
        picked: list[int] = []
        for _ in range(n_replicas):
            rest = [m for m in residual if m not in picked and residual[m] >= t.size_bytes]
            if not rest:
                raise PlacementError(
                    f"table {t.table_id} ({t.size_bytes} bytes) does not fit on "
                    f"{n_replicas} distinct MNs"
                )
            top = max(residual[m] for m in rest)
            band = [m for m in rest if residual[m] >= top - t.size_bytes]
            picked.append(min(band, key=lambda m: (
                sum(shared.get((m, p), 0) for p in picked), -residual[m], m)))
        for a in picked:
            residual[a] -= t.size_bytes
            for b in picked:
                if a != b:
                    shared[a, b] = shared.get((a, b), 0) + 1
        assignments[t.table_id] = tuple(sorted(picked))
    return PlacementPlan(n_replicas, assignments, residual)


def place(tables: Sequence[EmbeddingTable], mns: Mapping[int, int]) -> PlacementPlan:
    """Replica count followed by greedy allocation."""
    return greedy_allocate(tables, mns, compute_n_replicas(tables, mns))


def _route_order(tables: Sequence[EmbeddingTable], task_ids: Sequence[int]):
    for t in sorted(tables, key=lambda t: (-t.access_weight, t.table_id)):
        for task in sorted(task_ids):
            yield task, t


def greedy_route(plan: PlacementPlan, tables: Sequence[EmbeddingTable], task_ids: Sequence[int],
                 exclude: Iterable[int] = ()) -> RoutingTable:
    """Send each (task, table) access to the replica with least routed load so far.

    MNs in ``exclude`` are treated as unavailable.
    """
    dead = set(exclude)
    load = {m: 0.0 for m in plan.mn_ids() if m not in dead}
    entries = []
    for task, t in _route_order(tables, task_ids):
        if t.table_id not in plan.assignments:
            raise RoutingError(f"table {t.table_id} is not in the placement plan")
        live = [m for m in plan.assignments[t.table_id] if m not in dead]
        if not live:
            raise RoutingError(f"table {t.table_id} has no live replica")
        dest = min(live, key=lambda m: (load[m], m))
        load[dest] += t.access_weight
        entries.append((task, t.table_id, dest))
    return RoutingTable(entries, load)


def random_allocate_route(tables: Sequence[EmbeddingTable], mns: Mapping[int, int], n_replicas: int,
                          seed: int, task_ids: Sequence[int] = (0,), max_retries: int = 100
                          ) -> tuple[PlacementPlan, RoutingTable]:
    """Baseline: uniform random replica sets and uniform random destinations."""
    if not 1 <= n_replicas <= len(mns):
        raise PlacementError(f"n_replicas={n_replicas} needs 1..{len(mns)} MNs")
    rng = np.random.default_rng(seed)
    ids = np.array(sorted(mns))
    residual = {int(m): int(c) for m, c in mns.items()}
    assignments: dict[int, tuple[int, ...]] = {}
    for t in sorted(tables, key=lambda t: t.table_id):
        for _ in range(max_retries):
            pick = sorted(int(x) for x in rng.choice(ids, size=n_replicas, replace=False))
            if all(residual[m] >= t.size_bytes for m in pick):
                break
        else:
            raise PlacementError(f"random placement of table {t.table_id} failed {max_retries} times")
        for m in pick:
            residual[m] -= t.size_bytes
        assignments[t.table_id] = tuple(pick)
    plan = PlacementPlan(n_replicas, assignments, residual)
    load = {int(m): 0.0 for m in ids}
    entries = []
    for t in sorted(tables, key=lambda t: t.table_id):
        for task in sorted(task_ids):
            reps = assignments[t.table_id]
            dest = reps[int(rng.integers(len(reps)))]
            load[dest] += t.access_weight
            entries.append((task, t.table_id, dest))
    return plan, RoutingTable(entries, load)


def rebalance_after_mn_failure(plan: PlacementPlan, routing: RoutingTable, failed_mn: int,
                               tables: Sequence[EmbeddingTable], already_failed: Iterable[int] = ()
                               ) -> RoutingTable | ReinitRequired:
    """Re-run greedy routing over surviving MNs, or signal that data was lost."""
    dead = set(already_failed) | {failed_mn}
    lost = tuple(sorted(t for t, mns in plan.assignments.items() if all(m in dead for m in mns)))
    if lost:
        return ReinitRequired(tuple(sorted(dead)), lost)
    task_ids = sorted({task for task, _, _ in routing.entries})
    return greedy_route(plan, tables, task_ids, exclude=dead)


def coefficient_of_variation(values: Iterable[float]) -> float:
    arr = np.asarray(list(values), dtype=float)
    mean = arr.mean()
    return float(arr.std() / mean) if mean else math.inf


def check_plan(plan: PlacementPlan, tables: Sequence[EmbeddingTable], mns: Mapping[int, int]) -> None:
    """Raise if the plan violates replica distinctness or capacity."""
    used = {m: 0 for m in mns}
    sizes = {t.table_id: t.size_bytes for t in tables}
    for tid in sizes:
        reps = plan.assignments.get(tid, ())
        if len(reps) != plan.n_replicas or len(set(reps)) != len(reps):
            raise PlacementError(f"table {tid} has replicas {reps}")
        for m in reps:
            used[m] += sizes[tid]
    for m, cap in mns.items():
        if used[m] > cap or plan.residual_capacity[m] != cap - used[m]:
            raise PlacementError(f"MN {m} capacity accounting broken")
