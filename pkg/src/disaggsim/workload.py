"""Query traces, diurnal load curves and the query batcher."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from disaggsim.errors import ConfigError

US_PER_S = 1_000_000


@dataclass(frozen=True)
class Query:
    query_id: int
    arrival_time_us: float
    num_samples: int


@dataclass(frozen=True)
class LoadCurve:
    rates_qps: tuple[float, ...]
    interval_s: float = 600.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rates_qps", tuple(float(r) for r in self.rates_qps))
        if any(r <= 0 for r in self.rates_qps):
            raise ConfigError("load curve rates must be positive")
        if self.interval_s <= 0:
            raise ConfigError("interval_s must be positive")

    @property
    def peak_qps(self) -> float:
        return max(self.rates_qps) if self.rates_qps else 0.0

    def __len__(self) -> int:
        return len(self.rates_qps)

    def to_json(self) -> str:
        return json.dumps(list(self.rates_qps))

    @classmethod
    def from_json(cls, text: str, interval_s: float = 600.0) -> LoadCurve:
        data = json.loads(text)
        if not isinstance(data, list):
            raise ConfigError("load curve JSON must be an array of rates")
        return cls(tuple(data), interval_s)

    @classmethod
    def constant(cls, qps: float, duration_s: float) -> LoadCurve:
        return cls((qps,), duration_s)


def diurnal_curve(peak_qps: float, trough_ratio: float = 0.5, interval_s: float = 600.0,
                  peak_hour: float = 20.0, day_s: float = 86_400.0) -> LoadCurve:
    """Sinusoidal daily load with ``min/max == trough_ratio``, peaking at ``peak_hour``."""
    n = int(round(day_s / interval_s))
    mid = peak_qps * (1 + trough_ratio) / 2
    amp = peak_qps * (1 - trough_ratio) / 2
    rates = []
    for i in range(n):
        t_h = i * interval_s / 3600.0
        rates.append(mid + amp * math.cos(2 * math.pi * (t_h - peak_hour) / (day_s / 3600.0)))
    return LoadCurve(tuple(rates), interval_s)


@dataclass(frozen=True)
class SizeDistribution:
    """Query size distribution. ``kind`` is ``lognormal`` or ``constant``."""

    kind: str = "lognormal"
    mu: float = math.log(32.0)
    sigma: float = 1.2
    low: int = 1
    high: int = 4096
    value: int = 32

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, int(self.value), dtype=np.int64)
        if self.kind != "lognormal":
            raise ConfigError(f"unknown size distribution {self.kind!r}")
        out = np.empty(0, dtype=np.int64)
        # truncation by rejection keeps the in-range shape intact
        while out.size < n:
            draw = np.rint(rng.lognormal(self.mu, self.sigma, size=max(n - out.size, 16)))
            draw = draw[(draw >= self.low) & (draw <= self.high)].astype(np.int64)
            out = np.concatenate([out, draw])
        return out[:n]

    def mean(self, n: int = 200_000, seed: int = 12345) -> float:
        if self.kind == "constant":
            return float(self.value)
        return float(self.sample(np.random.default_rng(seed), n).mean())


def gen_trace(curve: LoadCurve, size_dist: SizeDistribution | None = None, seed: int = 0) -> list[Query]:
    """Poisson arrivals per interval at that interval's rate."""
    size_dist = size_dist or SizeDistribution()
    rng = np.random.default_rng(seed)
    times: list[np.ndarray] = []
    span_us = curve.interval_s * US_PER_S
    for i, rate in enumerate(curve.rates_qps):
        count = rng.poisson(rate * curve.interval_s)
        times.append(np.sort(rng.uniform(0.0, span_us, size=count)) + i * span_us)
    if not times:
        return []
    arrivals = np.concatenate(times)
    sizes = size_dist.sample(rng, arrivals.size)
    return [Query(i, float(t), int(s)) for i, (t, s) in enumerate(zip(arrivals, sizes))]


def trace_to_csv(trace: Iterable[Query]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "arrival_time_us", "num_samples"])
    for q in trace:
        w.writerow([q.query_id, repr(q.arrival_time_us), q.num_samples])
    return buf.getvalue()


def trace_from_csv(text: str) -> list[Query]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["query_id", "arrival_time_us", "num_samples"]:
        raise ConfigError(f"unexpected trace header {reader.fieldnames}")
    out = [Query(int(r["query_id"]), float(r["arrival_time_us"]), int(r["num_samples"]))
           for r in reader]
    for a, b in zip(out, out[1:]):
        if b.query_id <= a.query_id or b.arrival_time_us < a.arrival_time_us:
            raise ConfigError("trace must be ordered by arrival with increasing ids")
    return out


@dataclass
class Batch:
    batch_id: int
    formed_time_us: float
    # (query_id, samples contributed) in FIFO order
    segments: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_samples(self) -> int:
        return sum(n for _, n in self.segments)

    @property
    def member_query_ids(self) -> list[int]:
        return [q for q, _ in self.segments]


class Batcher:
    """Splits large queries and fuses small ones into batches of ``max_batch`` samples.

    A partial batch is emitted ``max_wait_us`` after its first sample arrived.
    Feed queries in arrival order with :meth:`push`; call :meth:`flush` at the end.
    """

    def __init__(self, max_batch: int, max_wait_us: float = 2000.0, first_id: int = 0):
        if max_batch < 1:
            raise ConfigError("max_batch must be >= 1")
        self.max_batch = max_batch
        self.max_wait_us = max_wait_us
        self._next_id = first_id
        self._open: Batch | None = None
        self._open_since = 0.0

    def _new(self, t: float) -> Batch:
        b = Batch(self._next_id, t)
        self._next_id += 1
        return b

    def _expire(self, now: float) -> list[Batch]:
        if self._open is not None and now > self._open_since + self.max_wait_us:
            b = self._open
            b.formed_time_us = self._open_since + self.max_wait_us
            self._open = None
            return [b]
        return []

    def push(self, q: Query) -> list[Batch]:
        out = self._expire(q.arrival_time_us)
        remaining = q.num_samples
        while remaining > 0:
            if self._open is None:
                self._open = self._new(q.arrival_time_us)
                self._open_since = q.arrival_time_us
            room = self.max_batch - self._open.num_samples
            take = min(room, remaining)
            self._open.segments.append((q.query_id, take))
            remaining -= take
            if self._open.num_samples == self.max_batch:
                self._open.formed_time_us = q.arrival_time_us
                out.append(self._open)
                self._open = None
        return out

    def flush(self) -> list[Batch]:
        if self._open is None:
            return []
        return self._expire(math.inf)


def batcher(queries: Iterable[Query], max_batch: int, max_wait_us: float = 2000.0) -> Iterator[Batch]:
    b = Batcher(max_batch, max_wait_us)
    for q in queries:
        yield from b.push(q)
    yield from b.flush()


def total_samples(queries: Sequence[Query]) -> int:
    return sum(q.num_samples for q in queries)
