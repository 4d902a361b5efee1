"""Recommendation model generations: embedding tables plus dense compute."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from disaggsim.catalog import GIB, TIB
from disaggsim.errors import ConfigError

DEFAULT_DIMS = (32, 64, 128)
DEFAULT_POOLING_MU = math.log(80.0)
DEFAULT_POOLING_SIGMA = 0.5
HASH_COST_US_PER_LOOKUP = 0.05


@dataclass(frozen=True)
class EmbeddingTable:
    table_id: int
    num_rows: int
    dim: int
    avg_pooling_factor: float
    element_bytes: int = 4

    def __post_init__(self) -> None:
        if self.num_rows <= 0 or self.dim <= 0 or self.element_bytes <= 0:
            raise ConfigError(f"table {self.table_id}: rows, dim and element size must be > 0")
        if self.avg_pooling_factor < 1:
            raise ConfigError(f"table {self.table_id}: pooling factor must be >= 1")

    @property
    def size_bytes(self) -> int:
        return self.num_rows * self.dim * self.element_bytes

    @property
    def row_bytes(self) -> int:
        return self.dim * self.element_bytes

    @property
    def access_weight(self) -> float:
        """Elements touched per sample."""
        return self.avg_pooling_factor * self.dim


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    tables: tuple[EmbeddingTable, ...]
    dense_gflops_per_sample: float
    preprocess_cost_us_per_sample: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", tuple(self.tables))
        if self.dense_gflops_per_sample <= 0:
            raise ConfigError(f"{self.model_id}: dense_gflops_per_sample must be > 0")
        if self.preprocess_cost_us_per_sample < 0:
            raise ConfigError(f"{self.model_id}: negative preprocess cost")
        ids = [t.table_id for t in self.tables]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{self.model_id}: duplicate table ids")

    @property
    def total_sparse_bytes(self) -> int:
        return sum(t.size_bytes for t in self.tables)

    @property
    def lookups_per_sample(self) -> float:
        return sum(t.avg_pooling_factor for t in self.tables)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "dense_gflops_per_sample": self.dense_gflops_per_sample,
            "preprocess_cost_us_per_sample": self.preprocess_cost_us_per_sample,
            "tables": [asdict(t) for t in self.tables],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModelSpec:
        known = {"model_id", "dense_gflops_per_sample", "preprocess_cost_us_per_sample", "tables"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown ModelSpec fields: {sorted(extra)}")
        try:
            tables = tuple(EmbeddingTable(**t) for t in data["tables"])
            return cls(
                model_id=data["model_id"],
                tables=tables,
                dense_gflops_per_sample=float(data["dense_gflops_per_sample"]),
                preprocess_cost_us_per_sample=float(data["preprocess_cost_us_per_sample"]),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad ModelSpec: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))


def default_preprocess_cost(tables: Sequence[EmbeddingTable],
                            us_per_lookup: float = HASH_COST_US_PER_LOOKUP) -> float:
    return us_per_lookup * sum(t.avg_pooling_factor for t in tables)


def _fit_rows(ideal_rows: Sequence[float], row_bytes: Sequence[int], target_bytes: float) -> list[int]:
    """Round row counts down, then let the largest table absorb the residual."""
    rows = [max(int(math.floor(r)), 1) for r in ideal_rows]
    total = sum(r * b for r, b in zip(rows, row_bytes))
    j = max(range(len(rows)), key=lambda i: (rows[i] * row_bytes[i], -i))
    rows[j] += int(round((target_bytes - total) / row_bytes[j]))
    if rows[j] < 1:
        raise ConfigError("total size too small for the table layout")
    return rows


def synth_tables(
    total_bytes: float,
    n_tables: int,
    dim_choices: Sequence[int] = DEFAULT_DIMS,
    pooling_mu: float = DEFAULT_POOLING_MU,
    pooling_sigma: float = DEFAULT_POOLING_SIGMA,
    seed: int = 0,
    size_sigma: float = 1.0,
    element_bytes: int = 4,
) -> list[EmbeddingTable]:
    """Synthetic heterogeneous tables whose sizes sum to ``total_bytes``.

    Sizes are lognormal draws rescaled to the total. Pooling factors are
    lognormal(``pooling_mu``, ``pooling_sigma``) clipped below at 1.
    """
    if n_tables < 1:
        raise ConfigError("n_tables must be >= 1")
    max_row = max(dim_choices) * element_bytes
    if total_bytes < n_tables * max_row:
        raise ConfigError(
            f"total_bytes {total_bytes} cannot hold {n_tables} tables of at least one row"
        )
    rng = np.random.default_rng(seed)
    dims = rng.choice(np.asarray(dim_choices), size=n_tables)
    weights = rng.lognormal(0.0, size_sigma, size=n_tables)
    pooling = np.maximum(rng.lognormal(pooling_mu, pooling_sigma, size=n_tables), 1.0)
    shares = weights / weights.sum() * total_bytes
    row_bytes = [int(d) * element_bytes for d in dims]
    rows = _fit_rows([s / b for s, b in zip(shares, row_bytes)], row_bytes, total_bytes)
    return [
        EmbeddingTable(i, rows[i], int(dims[i]), float(pooling[i]), element_bytes)
        for i in range(n_tables)
    ]


@dataclass(frozen=True)
class GenerationSeries:
    """Geometric growth of a base model over ``num_generations`` versions."""

    base: ModelSpec
    num_generations: int = 6
    sparse_growth_total: float = 1.0
    dense_growth_total: float = 1.0
    name: str = ""

    def factor(self, total: float, k: int) -> float:
        if self.num_generations == 1:
            return 1.0
        return total ** (k / (self.num_generations - 1))


def make_generation(series: GenerationSeries, k: int) -> ModelSpec:
    if not 0 <= k < series.num_generations:
        raise ConfigError(f"generation {k} outside 0..{series.num_generations - 1}")
    base = series.base
    prefix = series.name or base.model_id.split(".")[0]
    model_id = f"{prefix}.V{k}"
    sparse = series.factor(series.sparse_growth_total, k)
    dense = series.factor(series.dense_growth_total, k)
    tables = base.tables
    if k and sparse != 1.0:
        row_bytes = [t.row_bytes for t in tables]
        rows = _fit_rows([t.num_rows * sparse for t in tables], row_bytes,
                         base.total_sparse_bytes * sparse)
        tables = tuple(replace(t, num_rows=r) for t, r in zip(tables, rows))
    return replace(
        base,
        model_id=model_id,
        tables=tables,
        dense_gflops_per_sample=base.dense_gflops_per_sample * dense,
    )


def rm1_series(n_tables: int = 1000, seed: int = 1, dense_growth_total: float = 2.0) -> GenerationSeries:
    """Memory-dominated series: sparse 1.4 TB -> 7.8 TB.

    Dense growth is not numbered for this series; 2x is an assumption.
    """
    tables = synth_tables(1.4 * TIB, n_tables, seed=seed)
    base = ModelSpec("RM1.V0", tuple(tables), dense_gflops_per_sample=0.02,
                     preprocess_cost_us_per_sample=default_preprocess_cost(tables))
    return GenerationSeries(base, 6, sparse_growth_total=7.8 / 1.4,
                            dense_growth_total=dense_growth_total, name="RM1")


def rm2_series(n_tables: int = 200, seed: int = 2, sparse_growth_total: float = 2.0) -> GenerationSeries:
    """Compute-dominated series: dense FLOPs grow 18.9x.

    Size growth is not numbered for this series; 2x is an assumption.
    """
    tables = synth_tables(0.4 * TIB, n_tables, seed=seed)
    base = ModelSpec("RM2.V0", tuple(tables), dense_gflops_per_sample=0.2,
                     preprocess_cost_us_per_sample=default_preprocess_cost(tables))
    return GenerationSeries(base, 6, sparse_growth_total=sparse_growth_total,
                            dense_growth_total=18.9, name="RM2")


def single_table_model(size_bytes: int = GIB, dim: int = 64, pooling: float = 80.0,
                       dense_gflops: float = 0.02, model_id: str = "tiny") -> ModelSpec:
    rows = size_bytes // (dim * 4)
    table = EmbeddingTable(0, rows, dim, pooling)
    return ModelSpec(model_id, (table,), dense_gflops, default_preprocess_cost([table]))
