from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disaggsim.catalog import GIB, TIB
from disaggsim.errors import ConfigError
from disaggsim.model import (
    EmbeddingTable,
    GenerationSeries,
    ModelSpec,
    default_preprocess_cost,
    make_generation,
    rm1_series,
    rm2_series,
    single_table_model,
    synth_tables,
)

RM1 = rm1_series(n_tables=100)
RM2 = rm2_series(n_tables=50)


def test_rm1_first_generation_size():
    assert make_generation(RM1, 0).total_sparse_bytes == pytest.approx(1.4 * TIB, rel=1e-9)


def test_rm1_last_generation_size():
    assert make_generation(RM1, 5).total_sparse_bytes == pytest.approx(7.8 * TIB, rel=1e-9)


def test_rm2_dense_growth():
    base = make_generation(RM2, 0).dense_gflops_per_sample
    assert make_generation(RM2, 5).dense_gflops_per_sample == pytest.approx(18.9 * base, rel=1e-12)


def test_rm1_midpoint_is_geometric():
    # 1.4 * exp(0.4 * ln(7.8 / 1.4)) = 1.4 * exp(0.68708) = 2.7830 TiB
    got = make_generation(RM1, 2).total_sparse_bytes / TIB
    assert got == pytest.approx(2.7830, abs=1e-4)


def test_generation_out_of_range():
    with pytest.raises(ConfigError):
        make_generation(RM1, 6)


def test_single_table_is_exactly_one_gib():
    tables = synth_tables(GIB, 1, dim_choices=[64])
    assert len(tables) == 1 and tables[0].size_bytes == GIB and tables[0].dim == 64
    assert single_table_model(GIB).total_sparse_bytes == GIB


def test_eight_tables_rescale_bound():
    total = sum(t.size_bytes for t in synth_tables(8 * GIB, 8, seed=7)) / GIB
    assert 7.92 <= total <= 8.08


def test_synth_is_deterministic():
    assert synth_tables(8 * GIB, 8, seed=7) == synth_tables(8 * GIB, 8, seed=7)
    assert synth_tables(8 * GIB, 8, seed=7) != synth_tables(8 * GIB, 8, seed=8)


def test_synth_rejects_impossible_layout():
    with pytest.raises(ConfigError):
        synth_tables(100, 10)


def test_table_validation():
    with pytest.raises(ConfigError):
        EmbeddingTable(0, 0, 64, 10.0)
    with pytest.raises(ConfigError):
        EmbeddingTable(0, 10, 64, 0.5)


def test_table_weights():
    t = EmbeddingTable(3, 1000, 64, 80.0)
    assert t.size_bytes == 1000 * 64 * 4
    assert t.access_weight == 80.0 * 64


def test_model_roundtrip():
    m = make_generation(RM2, 3)
    assert ModelSpec.from_json(m.to_json()) == m
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({**m.to_dict(), "extra": 1})


def test_model_rejects_duplicate_ids():
    t = EmbeddingTable(0, 10, 8, 2.0)
    with pytest.raises(ConfigError):
        ModelSpec("dup", (t, t), 0.1, 0.0)


def test_preprocess_cost_scales_with_pooling():
    tables = [EmbeddingTable(0, 10, 8, 20.0), EmbeddingTable(1, 10, 8, 30.0)]
    assert default_preprocess_cost(tables, 0.05) == pytest.approx(2.5)


@given(k=st.sampled_from([0, 5]), sparse=st.floats(1.0, 10.0), dense=st.floats(1.0, 30.0))
def test_generation_endpoints_exact(k, sparse, dense):
    series = GenerationSeries(RM2.base, 6, sparse, dense)
    m = make_generation(series, k)
    want_s = RM2.base.total_sparse_bytes * (sparse if k else 1.0)
    want_d = RM2.base.dense_gflops_per_sample * (dense if k else 1.0)
    assert m.total_sparse_bytes == pytest.approx(want_s, rel=1e-9)
    assert m.dense_gflops_per_sample == pytest.approx(want_d, rel=1e-9)


@given(k=st.integers(0, 5), sparse=st.floats(1.0, 10.0))
def test_growth_axes_are_independent(k, sparse):
    a = make_generation(dataclasses.replace(RM2, sparse_growth_total=sparse), k)
    b = make_generation(RM2, k)
    assert a.dense_gflops_per_sample == b.dense_gflops_per_sample
    c = make_generation(dataclasses.replace(RM2, dense_growth_total=3.0), k)
    assert c.tables == b.tables


@given(total_gib=st.integers(1, 64), n=st.integers(1, 40), seed=st.integers(0, 1000))
def test_synth_total_within_one_row_per_table(total_gib, n, seed):
    tables = synth_tables(total_gib * GIB, n, seed=seed)
    assert len(tables) == n
    assert abs(sum(t.size_bytes for t in tables) - total_gib * GIB) <= max(t.row_bytes for t in tables)
