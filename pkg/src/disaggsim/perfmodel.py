"""Analytic stage-latency and communication models.

All durations are microseconds, bandwidths GiB/s. Every function is linear
in ``batch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from disaggsim.catalog import GIB, UPI_BW_GIBPS
from disaggsim.model import EmbeddingTable, ModelSpec

US_PER_S = 1e6

# per-socket rates observed on a dual-socket server with interleaved embeddings
NUMA_LOCAL_GIBPS = 93.0
NUMA_REMOTE_GIBPS = 52.0


@dataclass(frozen=True)
class PerfParams:
    gpu_effective_tflops: float = 20.0
    per_message_latency_us: float = 2.0
    upi_latency_us: float = 0.5
    index_bytes: int = 4
    fsum_bytes: int = 4
    numa_local_gibps: float = NUMA_LOCAL_GIBPS
    numa_remote_gibps: float = NUMA_REMOTE_GIBPS
    idle_power_fraction: float = 0.3
    # packets an interleaved memory node serves at once; 0 means no limit
    mn_concurrency: int = 0


@dataclass(frozen=True)
class LinkModel:
    bandwidth_gibps: float
    per_message_latency_us: float = 2.0

    def __post_init__(self) -> None:
        if self.bandwidth_gibps <= 0:
            raise ValueError("link bandwidth must be > 0")

    def transfer_us(self, nbytes: float) -> float:
        return nbytes / (self.bandwidth_gibps * GIB) * US_PER_S + self.per_message_latency_us


@dataclass
class StageCosts:
    preprocess_us: float
    scatter_us: float
    sparse_us_per_mn: dict[int, float] = field(default_factory=dict)
    gather_us: float = 0.0
    dense_us: float = 0.0

    @property
    def sparse_us(self) -> float:
        return max(self.sparse_us_per_mn.values(), default=0.0)

    @property
    def total_us(self) -> float:
        return self.preprocess_us + self.scatter_us + self.sparse_us + self.gather_us + self.dense_us


def bytes_to_us(nbytes: float, bw_gibps: float) -> float:
    return nbytes / (bw_gibps * GIB) * US_PER_S


def embedding_bytes_per_sample(tables: Sequence[EmbeddingTable]) -> float:
    return sum(t.access_weight * t.element_bytes for t in tables)


def index_bytes_per_sample(tables: Sequence[EmbeddingTable], index_bytes: int = 4) -> float:
    return sum(t.avg_pooling_factor for t in tables) * index_bytes


def fsum_bytes_per_sample(tables: Sequence[EmbeddingTable], fsum_bytes: int = 4) -> float:
    return sum(t.dim for t in tables) * fsum_bytes


def sparse_time(batch: int, routed_tables: Sequence[EmbeddingTable], mem_bw_gibps: float) -> float:
    """Bandwidth-bound lookup-and-pool time on one memory node."""
    if mem_bw_gibps <= 0:
        raise ValueError("memory bandwidth must be > 0")
    return bytes_to_us(batch * embedding_bytes_per_sample(routed_tables), mem_bw_gibps)


def comm_time(batch: int, tables: Sequence[EmbeddingTable], link: LinkModel,
              direction: str, index_bytes: int = 4, fsum_bytes: int = 4) -> float:
    """One scatter (lookup indices) or gather (pooled vectors) message."""
    if direction == "scatter_indices":
        per_sample = index_bytes_per_sample(tables, index_bytes)
    elif direction == "gather_fsum":
        per_sample = fsum_bytes_per_sample(tables, fsum_bytes)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return link.transfer_us(batch * per_sample)


def dense_time(batch: int, model: ModelSpec, gpu_effective_tflops: float = 20.0, n_gpus: int = 1) -> float:
    """FC-layer time for one batch on one GPU replica.

    ``n_gpus`` only validates the replica count; batches are spread over
    replicas by the simulator.
    """
    if n_gpus < 1:
        raise ValueError("need at least one GPU")
    flops = batch * model.dense_gflops_per_sample * 1e9
    return flops / (gpu_effective_tflops * 1e12) * US_PER_S


def preprocess_time(batch: int, model: ModelSpec, cores: int = 1) -> float:
    return batch * model.preprocess_cost_us_per_sample / max(cores, 1)


@dataclass(frozen=True)
class NumaBreakdown:
    sparse_us: float
    comm_us: float

    @property
    def total_us(self) -> float:
        return self.sparse_us + self.comm_us


def numa_breakdown(batch: int, tables: Sequence[EmbeddingTable], mode: str,
                   params: PerfParams = PerfParams(), local_bw_gibps: float = 145.0,
                   upi_gibps: float = UPI_BW_GIBPS) -> NumaBreakdown:
    """SparseNet time on a dual-socket server.

    ``naive``: every socket reads half its embeddings locally and half over
    the interconnect. ``numa_aware``: each socket shard owns half the tables
    and reads locally; only the remote half's indices and pooled vectors
    cross the interconnect.
    """
    total = batch * embedding_bytes_per_sample(tables)
    half = total / 2
    if mode == "naive":
        return NumaBreakdown(
            max(bytes_to_us(half, params.numa_local_gibps), bytes_to_us(half, params.numa_remote_gibps)),
            0.0,
        )
    if mode != "numa_aware":
        raise ValueError(f"unknown NUMA mode {mode!r}")
    if total == 0:
        return NumaBreakdown(0.0, 0.0)
    upi = LinkModel(upi_gibps, params.upi_latency_us)
    remote_payload = batch * (index_bytes_per_sample(tables, params.index_bytes)
                              + fsum_bytes_per_sample(tables, params.fsum_bytes)) / 2
    return NumaBreakdown(bytes_to_us(half, local_bw_gibps), upi.transfer_us(remote_payload))


def numa_sparse_time(batch: int, tables: Sequence[EmbeddingTable], mode: str,
                     params: PerfParams = PerfParams(), local_bw_gibps: float = 145.0) -> float:
    return numa_breakdown(batch, tables, mode, params, local_bw_gibps).total_us


def naive_numa_effective_bw(params: PerfParams = PerfParams()) -> float:
    """Bandwidth that reproduces the naive NUMA time through :func:`sparse_time`."""
    return 2 * min(params.numa_local_gibps, params.numa_remote_gibps)


def stage_costs(batch: int, model: ModelSpec, routed: Mapping[int, Sequence[EmbeddingTable]],
                mem_bw: Mapping[int, float], link: LinkModel, preprocess_cores: int = 1,
                params: PerfParams = PerfParams()) -> StageCosts:
    """Per-stage times for one batch in an otherwise idle unit (no queueing)."""
    scatter = sum(comm_time(batch, ts, link, "scatter_indices", params.index_bytes)
                  for ts in routed.values())
    gather = sum(comm_time(batch, ts, link, "gather_fsum", fsum_bytes=params.fsum_bytes)
                 for ts in routed.values())
    return StageCosts(
        preprocess_us=preprocess_time(batch, model, preprocess_cores),
        scatter_us=scatter,
        sparse_us_per_mn={mn: sparse_time(batch, ts, mem_bw[mn]) for mn, ts in routed.items()},
        gather_us=gather,
        dense_us=dense_time(batch, model, params.gpu_effective_tflops),
    )
