"""Deterministic discrete-event simulation of one serving unit.

Every resource (a task's CPU, NIC transmit and receive sides, each GPU
replica, each memory role) is a FIFO server. Work is reserved on a resource
when its input is ready, so a resource's schedule is fixed at reservation
time; batches hit by a failure are re-issued under a new attempt number and
events of the old attempt are dropped.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from disaggsim import failures as fl
from disaggsim.errors import ConfigError, SimulationInvariantError
from disaggsim.perfmodel import bytes_to_us
from disaggsim.unit import Scheduler, ServingUnitState
from disaggsim.workload import Batch, Batcher, Query, SizeDistribution, gen_trace, LoadCurve

log = logging.getLogger(__name__)

# event kinds; the number is the same-instant priority
NODE_FAIL, NODE_RECOVER, CONTROL = 0, 1, 2
ARRIVAL, BATCH_FORMED, PREPROCESS_DONE, SCATTER_DONE, SHARD_DONE, GATHER_DONE, DENSE_DONE = 3, 4, 5, 6, 7, 8, 9
MN_TICK = 10
KIND_NAMES = {
    NODE_FAIL: "node_fail", NODE_RECOVER: "node_recover", CONTROL: "control",
    ARRIVAL: "arrival", BATCH_FORMED: "batch_formed", PREPROCESS_DONE: "preprocess_done",
    SCATTER_DONE: "scatter_done", SHARD_DONE: "shard_done", GATHER_DONE: "gather_done",
    DENSE_DONE: "dense_done", MN_TICK: "mn_tick",
}
_EPS_US = 1e-7


class Resource:
    __slots__ = ("name", "power_w", "free_at", "busy_us", "_pending")

    def __init__(self, name: str, power_w: float):
        self.name = name
        self.power_w = power_w
        self.free_at = 0.0
        self.busy_us = 0.0
        self._pending: deque[tuple[float, float]] = deque()

    def reserve(self, now: float, duration: float) -> float:
        """Queue ``duration`` of work behind earlier reservations; return its end."""
        while self._pending and self._pending[0][1] <= now:
            self._pending.popleft()
        start = max(now, self.free_at)
        end = start + duration
        self.free_at = end
        self.busy_us += duration
        self._pending.append((start, end))
        return end

    def cancel_after(self, t: float, available_at: float) -> None:
        """Drop work not yet performed at ``t``; the resource is back at ``available_at``."""
        while self._pending and self._pending[-1][1] > t:
            start, end = self._pending.pop()
            self.busy_us -= end - max(start, t)
        self.free_at = max(available_at, t)


class SharedServer:
    """Memory role serving several packets at once, bandwidth split evenly.

    Packets are admitted in arrival order; with ``concurrency > 0`` at most
    that many are in service and the rest wait FCFS.
    """

    def __init__(self, name: str, power_w: float, concurrency: int = 0):
        self.name = name
        self.power_w = power_w
        self.concurrency = concurrency
        self.busy_us = 0.0
        self.version = 0
        self._last = 0.0
        self._active: dict[tuple, float] = {}
        self._waiting: deque[tuple[tuple, float]] = deque()

    @property
    def free_at(self) -> float:
        return self._last + sum(self._active.values()) + sum(w for _, w in self._waiting)

    def _advance(self, now: float) -> None:
        n = len(self._active)
        if n and now > self._last:
            dec = (now - self._last) / n
            for k in self._active:
                self._active[k] -= dec
            self.busy_us += now - self._last
        self._last = max(self._last, now)

    def add(self, now: float, key: tuple, work_us: float) -> None:
        self._advance(now)
        if self.concurrency and len(self._active) >= self.concurrency:
            self._waiting.append((key, work_us))
        else:
            self._active[key] = work_us
        self.version += 1

    def next_completion(self) -> float | None:
        if not self._active:
            return None
        return self._last + min(self._active.values()) * len(self._active)

    def pop_finished(self, now: float) -> list[tuple]:
        self._advance(now)
        done = [k for k, rem in self._active.items() if rem <= _EPS_US]
        for k in done:
            del self._active[k]
        while self._waiting and (not self.concurrency or len(self._active) < self.concurrency):
            k, w = self._waiting.popleft()
            self._active[k] = w
        self.version += 1
        return done

    def cancel_after(self, t: float, available_at: float) -> None:
        self._advance(t)
        self._active.clear()
        self._waiting.clear()
        self._last = max(available_at, t)
        self.version += 1


@dataclass
class BatchState:
    batch: Batch
    task: int
    attempt: int = 0
    stage: str = "queued"
    packets: dict[int, object] = field(default_factory=dict)
    outstanding: int = 0
    delivered: int = 0


@dataclass
class SimResult:
    per_query_latency_us: list[float]
    p95_latency_us: float
    achieved_qps: float
    offered_qps: float
    busy_fractions: dict[str, float]
    energy_joules: float
    avg_power_w: float
    horizon_us: float
    n_queries: int
    n_completed: int
    busy_us: dict[str, float] = field(default_factory=dict)
    routing_log: list[tuple[float, str, str]] = field(default_factory=list)
    event_log: list[tuple] = field(default_factory=list)
    n_retried_batches: int = 0
    # ids of completed queries, aligned with per_query_latency_us
    query_ids: list[int] = field(default_factory=list)
    # completions over the arrival span stretched by the backlog drain
    sustained_qps: float = 0.0

    def to_dict(self, include_latencies: bool = True) -> dict:
        out = {
            "p95_latency_us": self.p95_latency_us,
            "achieved_qps": self.achieved_qps,
            "sustained_qps": self.sustained_qps,
            "offered_qps": self.offered_qps,
            "busy_fractions": dict(sorted(self.busy_fractions.items())),
            "energy_joules": self.energy_joules,
            "avg_power_w": self.avg_power_w,
            "horizon_us": self.horizon_us,
            "n_queries": self.n_queries,
            "n_completed": self.n_completed,
            "n_retried_batches": self.n_retried_batches,
        }
        if include_latencies:
            out["per_query_latency_us"] = self.per_query_latency_us
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def event_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_us", "seq", "kind", "batch_id", "target"])
        for row in self.event_log:
            w.writerow([repr(row[0]), row[1], row[2], row[3], row[4]])
        return buf.getvalue()


def p95(latencies: Sequence[float]) -> float:
    """Nearest-rank 95th percentile."""
    if not latencies:
        return math.inf
    ordered = sorted(latencies)
    return ordered[max(math.ceil(0.95 * len(ordered)) - 1, 0)]


class Simulator:
    """One run of a serving unit over a query trace.

    ``failure_trace`` node ids name unit slots (``cn0``, ``mn3``, ``srv1``);
    a failure hits whichever node currently fills the slot.
    """

    def __init__(self, state: ServingUnitState, max_batch: int, max_wait_us: float = 2000.0,
                 failure_trace: fl.FailureTrace | None = None,
                 failure_profiles: dict[str, fl.FailureProfile] | None = None,
                 record_events: bool = False):
        if max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        self.state = state
        self.max_batch = max_batch
        self.max_wait_us = max_wait_us
        self.failure_trace = failure_trace or fl.FailureTrace([])
        self.failure_profiles = failure_profiles or {}
        self.record_events = record_events

    # -- resources -----------------------------------------------------

    def _build_resources(self) -> None:
        st = self.state
        self.res: dict[str, Resource] = {}
        self.cpu: dict[int, Resource] = {}
        self.tx: dict[int, Resource] = {}
        self.rx: dict[int, Resource] = {}
        self.gpus: dict[int, list[Resource]] = {}
        self.gpu_rr: dict[int, int] = {}
        for t in st.tasks:
            self.cpu[t.task_id] = self._add(f"task{t.task_id}.cpu", t.cpu_power_w)
            self.tx[t.task_id] = self._add(f"task{t.task_id}.tx", t.nic_power_w / 2)
            self.rx[t.task_id] = self._add(f"task{t.task_id}.rx", t.nic_power_w / 2)
            self.gpus[t.task_id] = [self._add(f"task{t.task_id}.gpu{g}", t.gpu_power_w)
                                    for g in range(t.n_gpus)]
            self.gpu_rr[t.task_id] = 0
        self.mnres: dict[int, Resource] = {}
        for m, role in sorted(st.mns.items()):
            self.mnres[m] = self._add_mn(m, role.power_w)
        self.lockstep_free = 0.0

    def _add(self, name: str, power: float) -> Resource:
        r = Resource(name, power)
        self.res[name] = r
        return r

    def _add_mn(self, mn: int, power: float):
        if self.state.scheduler is Scheduler.INTERLEAVED:
            r = SharedServer(f"mn{mn}", power, self.state.perf.mn_concurrency)
            self.res[r.name] = r
            return r
        return self._add(f"mn{mn}", power)

    def _kick(self, mn: int) -> None:
        server = self.mnres[mn]
        t = server.next_completion()
        if t is not None:
            self._push(t, MN_TICK, mn, (mn, server.version))

    def _on_mn_tick(self, now: float, payload: tuple) -> None:
        mn, version = payload
        server = self.mnres.get(mn)
        if server is None or server.version != version:
            return
        for bid, attempt in server.pop_finished(now):
            self._push(now, SHARD_DONE, bid, (bid, attempt, mn))
        self._kick(mn)

    # -- event queue ---------------------------------------------------

    def _push(self, time: float, kind: int, key: int, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, kind, key, self._seq, payload))

    # -- run -----------------------------------------------------------

    def run(self, trace: Sequence[Query], sla_us: float = math.inf) -> SimResult:
        st = self.state
        self._heap: list = []
        self._seq = 0
        self._build_resources()
        self.link = st.link
        self.batches: dict[int, BatchState] = {}
        self.pending_task: dict[int, list[int]] = {t.task_id: [] for t in st.tasks}
        self.pending_routing: list[int] = []
        self.remaining: dict[int, int] = {}
        self.completion: dict[int, float] = {}
        self.routing_log: list[tuple[float, str, str]] = [(0.0, "initial", st.routing.digest())]
        self.event_log: list[tuple] = []
        self.retried = 0
        self.recovering_mns: set[int] = set()

        arrivals = {q.query_id: q.arrival_time_us for q in trace}
        for q in trace:
            self.remaining[q.query_id] = q.num_samples
        for batch, task in self._form_batches(trace):
            self.batches[batch.batch_id] = BatchState(batch, task)
            self._push(batch.formed_time_us, BATCH_FORMED, batch.batch_id, (batch.batch_id, 0))
        for i, ev in enumerate(self.failure_trace.events):
            kind = NODE_FAIL if ev.kind == "fail" else NODE_RECOVER
            self._push(ev.time_us, kind, i, (ev.node_id,))

        handlers = {
            NODE_FAIL: self._on_fail, NODE_RECOVER: self._on_recover, CONTROL: self._on_control,
            BATCH_FORMED: self._on_formed, PREPROCESS_DONE: self._on_preprocessed,
            SCATTER_DONE: self._on_delivered, SHARD_DONE: self._on_shard_done,
            GATHER_DONE: self._on_gathered, DENSE_DONE: self._on_dense_done,
            MN_TICK: self._on_mn_tick,
        }
        now = 0.0
        while self._heap:
            time, kind, key, seq, payload = heapq.heappop(self._heap)
            if time < now:
                raise SimulationInvariantError("event processed out of time order")
            now = time
            if BATCH_FORMED < kind < MN_TICK:
                bs = self.batches[payload[0]]
                if payload[1] != bs.attempt:
                    continue  # stale event of an aborted attempt
            if self.record_events:
                self.event_log.append((time, seq, KIND_NAMES[kind], key, payload[-1] if len(payload) > 2 else ""))
            handlers[kind](now, payload)

        if self.pending_routing or any(self.pending_task.values()):
            raise SimulationInvariantError("batches left waiting at end of simulation")
        return self._result(trace, arrivals, sla_us)

    def _form_batches(self, trace: Sequence[Query]) -> list[tuple[Batch, int]]:
        n = len(self.state.tasks)
        batchers = [Batcher(self.max_batch, self.max_wait_us) for _ in range(n)]
        raw: list[tuple[float, int, int, Batch]] = []
        for i, q in enumerate(trace):
            task = i % n
            for b in batchers[task].push(q):
                raw.append((b.formed_time_us, task, b.batch_id, b))
        for task, b in enumerate(batchers):
            for batch in b.flush():
                raw.append((batch.formed_time_us, task, batch.batch_id, batch))
        raw.sort(key=lambda r: (r[0], r[1], r[2]))
        out = []
        for new_id, (_, task, _, b) in enumerate(raw):
            b.batch_id = new_id
            out.append((b, task))
        return out

    # -- pipeline ------------------------------------------------------

    def _on_formed(self, now: float, payload: tuple) -> None:
        bid = payload[0]
        bs = self.batches[bid]
        if bs.task in self.state.down_tasks:
            self.pending_task[bs.task].append(bid)
            bs.stage = "waiting_task"
            return
        self._start_preprocess(now, bs)

    def _start_preprocess(self, now: float, bs: BatchState) -> None:
        st = self.state
        task = st.tasks[bs.task]
        dur = bs.batch.num_samples * st.model.preprocess_cost_us_per_sample / task.preprocess_cores
        end = self.cpu[bs.task].reserve(now, dur)
        bs.stage = "preprocess"
        self._push(end, PREPROCESS_DONE, bs.batch.batch_id, (bs.batch.batch_id, bs.attempt))

    def _on_preprocessed(self, now: float, payload: tuple) -> None:
        self._scatter(now, self.batches[payload[0]])

    def _scatter(self, now: float, bs: BatchState) -> None:
        st = self.state
        packets = st.packets(bs.task)
        if set(packets) & st.dead_mns:
            if not set(packets) & st.dead_mns <= self.recovering_mns:
                raise SimulationInvariantError("routing references a dead MN outside a failure window")
            bs.stage = "waiting_routing"
            self.pending_routing.append(bs.batch.batch_id)
            return
        missing = set(packets) - set(st.mns)
        if missing:
            raise SimulationInvariantError(f"routing references unknown MNs {sorted(missing)}")
        bs.packets = packets
        bs.outstanding = len(packets)
        bs.delivered = 0
        bs.stage = "scatter"
        n = bs.batch.num_samples
        colocated = st.tasks[bs.task].colocated_mn
        order = sorted(packets)
        if order:
            k = bs.task % len(order)
            order = order[k:] + order[:k]
        bid = bs.batch.batch_id
        for mn in order:
            if mn == colocated:
                self._push(now, SCATTER_DONE, bid, (bid, bs.attempt, mn))
            else:
                dur = self.link.transfer_us(n * packets[mn].idx_bytes)
                end = self.tx[bs.task].reserve(now, dur)
                self._push(end, SCATTER_DONE, bid, (bid, bs.attempt, mn))

    def _sparse_us(self, bs: BatchState, mn: int) -> float:
        return bytes_to_us(bs.batch.num_samples * bs.packets[mn].emb_bytes, self.state.mn_bandwidth(mn))

    def _on_delivered(self, now: float, payload: tuple) -> None:
        bid, attempt, mn = payload
        bs = self.batches[bid]
        bs.delivered += 1
        if self.state.scheduler is Scheduler.INTERLEAVED:
            self.mnres[mn].add(now, (bid, attempt), self._sparse_us(bs, mn))
            self._kick(mn)
            return
        if bs.delivered < len(bs.packets):
            return
        # lock step: this batch runs on all its MNs once every MN is free
        bs.stage = "sparse"
        start = max(now, self.lockstep_free, *(self.mnres[m].free_at for m in bs.packets))
        longest = 0.0
        for m in sorted(bs.packets):
            dur = self._sparse_us(bs, m)
            end = self.mnres[m].reserve(start, dur)
            longest = max(longest, dur)
            self._push(end, SHARD_DONE, bid, (bid, attempt, m))
        self.lockstep_free = start + longest

    def _on_shard_done(self, now: float, payload: tuple) -> None:
        bid, attempt, _mn = payload
        bs = self.batches[bid]
        bs.outstanding -= 1
        if bs.outstanding:
            return
        bs.stage = "gather"
        colocated = self.state.tasks[bs.task].colocated_mn
        end = now
        order = sorted(bs.packets)
        if order:
            k = bs.task % len(order)
            order = order[k:] + order[:k]
        for mn in order:
            if mn == colocated:
                continue
            dur = self.link.transfer_us(bs.batch.num_samples * bs.packets[mn].fsum_bytes)
            end = max(end, self.rx[bs.task].reserve(now, dur))
        self._push(end, GATHER_DONE, bid, (bid, attempt))

    def _on_gathered(self, now: float, payload: tuple) -> None:
        bid, attempt = payload
        bs = self.batches[bid]
        st = self.state
        gpus = self.gpus[bs.task]
        g = self.gpu_rr[bs.task] % len(gpus)
        self.gpu_rr[bs.task] += 1
        flops = bs.batch.num_samples * st.model.dense_gflops_per_sample * 1e9
        dur = flops / (st.perf.gpu_effective_tflops * 1e12) * 1e6
        end = gpus[g].reserve(now, dur)
        bs.stage = "dense"
        self._push(end, DENSE_DONE, bid, (bid, attempt))

    def _on_dense_done(self, now: float, payload: tuple) -> None:
        bs = self.batches[payload[0]]
        bs.stage = "done"
        for qid, n in bs.batch.segments:
            self.remaining[qid] -= n
            if self.remaining[qid] == 0:
                self.completion[qid] = now
            elif self.remaining[qid] < 0:
                raise SimulationInvariantError(f"query {qid} completed more samples than it has")

    # -- failures ------------------------------------------------------

    def _abort(self, bs: BatchState) -> None:
        bs.attempt += 1
        self.retried += 1

    def _on_fail(self, now: float, payload: tuple) -> None:
        node_id = payload[0]
        st = self.state
        nodes = st.nodes()
        if node_id not in nodes:
            log.info("failure of retired node %s ignored", node_id)
            return
        tasks, mns = nodes[node_id]
        if any(t in st.down_tasks for t in tasks) or any(m in st.dead_mns for m in mns):
            log.info("failure of node %s while already down ignored", node_id)
            return
        action = fl.apply_failure(st, node_id, self.failure_profiles.get(node_id))
        fl.fail_now(st, action)
        up = now + action.delay_us
        for t in getattr(action, "task_ids", ()):
            for r in (self.cpu[t], self.tx[t], self.rx[t], *self.gpus[t]):
                r.cancel_after(now, up)
        for m in getattr(action, "mn_ids", ()) + getattr(action, "failed_mns", ()):
            self.mnres[m].cancel_after(now, up)
        down_tasks = set(getattr(action, "task_ids", ()))
        dead = set(getattr(action, "mn_ids", ())) | set(getattr(action, "failed_mns", ()))
        self.recovering_mns |= dead
        for bid, bs in self.batches.items():
            if bs.stage in ("done", "queued", "waiting_task", "waiting_routing"):
                continue
            hit = bs.task in down_tasks
            if not hit and dead and bs.stage in ("scatter", "sparse") and set(bs.packets) & dead:
                hit = True
            if not hit:
                continue
            self._abort(bs)
            if bs.task in down_tasks:
                bs.stage = "waiting_task"
                self.pending_task[bs.task].append(bid)
            else:
                bs.stage = "waiting_routing"
                self.pending_routing.append(bid)
        self.routing_log.append((now, f"fail:{node_id}", st.routing.digest()))
        self._push(up, CONTROL, 0, (action,))

    def _on_recover(self, now: float, payload: tuple) -> None:
        # slots are refilled by the recovery action itself; the physical node
        # coming back only joins the spare pool
        log.debug("node %s back at %.0f us", payload[0], now)

    def _on_control(self, now: float, payload: tuple) -> None:
        action = payload[0]
        st = self.state
        fl.complete(st, action)
        if isinstance(action, fl.Reinit):
            for b in action.backups:
                self.mnres[b.mn_id] = self._add_mn(b.mn_id, b.power_w)
                self.mnres[b.mn_id].cancel_after(now, now)
            for m in action.failed_mns:
                self.mnres.pop(m, None)
        self.recovering_mns.difference_update(getattr(action, "mn_ids", ()) + getattr(action, "failed_mns", ()))
        if isinstance(action, (fl.Reroute, fl.Reinit)):
            fl.check_routing_live(st)
        self.routing_log.append((now, f"recovered:{action.node_id}", st.routing.digest()))
        for t in getattr(action, "task_ids", ()):
            waiting, self.pending_task[t] = sorted(self.pending_task[t]), []
            for bid in waiting:
                self._start_preprocess(now, self.batches[bid])
        waiting, self.pending_routing = sorted(self.pending_routing), []
        for bid in waiting:
            bs = self.batches[bid]
            if bs.task in st.down_tasks:
                bs.stage = "waiting_task"
                self.pending_task[bs.task].append(bid)
            else:
                self._scatter(now, bs)

    # -- accounting ----------------------------------------------------

    def _result(self, trace: Sequence[Query], arrivals: dict[int, float], sla_us: float) -> SimResult:
        latencies = [self.completion[q.query_id] - q.arrival_time_us
                     for q in trace if q.query_id in self.completion]
        n = len(trace)
        first = min(arrivals.values(), default=0.0)
        last_arrival = max(arrivals.values(), default=0.0)
        last_done = max(self.completion.values(), default=first)
        horizon = max([last_done] + [r.free_at for r in self.res.values()]) - 0.0
        horizon = max(horizon, 1e-9)
        busy = {name: r.busy_us for name, r in sorted(self.res.items())}
        fractions = {name: min(max(b / horizon, 0.0), 1.0) for name, b in busy.items()}
        idle = self.state.perf.idle_power_fraction
        energy = sum(r.power_w * (min(r.busy_us, horizon) + idle * (horizon - min(r.busy_us, horizon)))
                     for r in self.res.values()) / 1e6
        span_c = last_done - first
        span_a = last_arrival - first
        achieved = len(self.completion) / (span_c / 1e6) if span_c > 0 else 0.0
        offered = n / (span_a / 1e6) if span_a > 0 else math.inf
        # a stable unit drains its last arrival in about a typical latency;
        # an overloaded one carries a backlog that grows with the trace
        drain = max(latencies[-1] - float(np.median(latencies)), 0.0) if latencies else 0.0
        window = span_a + drain
        sustained = len(self.completion) / (window / 1e6) if window > 0 else 0.0
        return SimResult(
            per_query_latency_us=latencies,
            p95_latency_us=p95(latencies),
            achieved_qps=achieved,
            offered_qps=offered,
            busy_fractions=fractions,
            energy_joules=energy,
            avg_power_w=energy / (horizon / 1e6),
            horizon_us=horizon,
            n_queries=n,
            n_completed=len(self.completion),
            busy_us=busy,
            routing_log=self.routing_log,
            event_log=self.event_log,
            n_retried_batches=self.retried,
            query_ids=[q.query_id for q in trace if q.query_id in self.completion],
            sustained_qps=sustained,
        )


def run(unit: ServingUnitState, trace: Sequence[Query], sla_us: float = math.inf, max_batch: int = 128,
        max_wait_us: float = 2000.0, **kwargs) -> SimResult:
    """Simulate ``trace`` on ``unit`` (which is mutated only by failures)."""
    return Simulator(unit, max_batch, max_wait_us, **kwargs).run(trace, sla_us)


# -- latency-bounded throughput ---------------------------------------

@dataclass
class HillClimbResult:
    best_qps: float
    best_batch: int | None
    qps_by_batch: dict[int, float]
    best_result: SimResult | None = None
    diagnostic: str = ""


Probe = Callable[[int, float], SimResult]


def is_feasible(res: SimResult, sla_us: float, min_throughput_ratio: float = 0.95) -> bool:
    """p95 within SLA and the unit keeps up with the offered rate."""
    if res.n_completed < res.n_queries or res.n_queries == 0:
        return False
    if res.p95_latency_us > sla_us:
        return False
    return res.sustained_qps >= min_throughput_ratio * res.offered_qps


def _max_feasible_rate(probe: Probe, batch: int, sla_us: float, rate_grid: Sequence[float],
                       ratio: float) -> tuple[float, SimResult | None]:
    lo, hi = 0, len(rate_grid) - 1
    best_rate, best_res = 0.0, None
    res = probe(batch, rate_grid[0])
    if not is_feasible(res, sla_us, ratio):
        return 0.0, None
    best_rate, best_res = rate_grid[0], res
    lo = 1
    while lo <= hi:
        mid = (lo + hi) // 2
        res = probe(batch, rate_grid[mid])
        if is_feasible(res, sla_us, ratio):
            best_rate, best_res = rate_grid[mid], res
            lo = mid + 1
        else:
            hi = mid - 1
    return best_rate, best_res


def hill_climb_qps(probe: Probe, sla_us: float, batch_candidates: Sequence[int], rate_grid: Sequence[float],
                   plateau_eps: float = 0.01, min_throughput_ratio: float = 0.95) -> HillClimbResult:
    """Latency-bounded throughput search.

    For each batch size (ascending) the highest feasible rate in the sorted
    ``rate_grid`` is found by binary search; the climb stops once QPS drops
    or improves by less than ``plateau_eps``.
    """
    if not batch_candidates or not rate_grid:
        raise ConfigError("batch candidates and rate grid must be non-empty")
    grid = sorted(rate_grid)
    qps_by_batch: dict[int, float] = {}
    best_qps, best_batch, best_res = 0.0, None, None
    prev = None
    for batch in sorted(set(batch_candidates)):
        qps, res = _max_feasible_rate(probe, batch, sla_us, grid, min_throughput_ratio)
        qps_by_batch[batch] = qps
        if qps > best_qps:
            best_qps, best_batch, best_res = qps, batch, res
        if prev is not None and prev > 0 and qps < prev * (1 + plateau_eps):
            break
        prev = qps
    diag = ""
    if best_batch is None:
        diag = (f"no batch size in {sorted(set(batch_candidates))} meets p95 <= {sla_us} us "
                f"at the minimum rate {grid[0]:.4g} qps")
    return HillClimbResult(best_qps, best_batch, qps_by_batch, best_res, diag)


def default_rate_grid(capacity_qps: float, points: int = 40, low: float = 0.02, high: float = 1.2) -> list[float]:
    return [float(x) for x in np.geomspace(low * capacity_qps, high * capacity_qps, points)]


def characterize(state_factory: Callable[[], ServingUnitState], sla_us: float,
                 batch_candidates: Sequence[int] = (16, 32, 64, 128, 256, 512, 1024),
                 size_dist: SizeDistribution | None = None, n_queries: int = 300,
                 max_wait_us: float = 2000.0, seed: int = 0, rate_points: int = 40,
                 plateau_eps: float = 0.01) -> HillClimbResult:
    """Hill-climb a unit with Poisson traces of about ``n_queries`` queries per probe."""
    size_dist = size_dist or SizeDistribution()
    mean = size_dist.mean()
    base = state_factory()
    cap = max(base.capacity_qps(b, mean) for b in batch_candidates)
    grid = default_rate_grid(cap, rate_points)

    def probe(batch: int, rate: float) -> SimResult:
        trace = gen_trace(LoadCurve.constant(rate, n_queries / rate), size_dist, seed)
        return run(state_factory(), trace, sla_us, batch, max_wait_us)

    return hill_climb_qps(probe, sla_us, batch_candidates, grid, plateau_eps)


def saturation_trace(n_queries: int, samples: int, start_us: float = 0.0) -> list[Query]:
    """All queries arrive at once; the unit runs flat out."""
    return [Query(i, start_us, samples) for i in range(n_queries)]
