"""Experiment configuration: validated schema, presets and object builders."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from disaggsim.capacity import CostRates, DeploymentOption, SimSettings
from disaggsim.catalog import (
    GIB,
    TIB,
    Deployment,
    NodeConfig,
    ServingUnitConfig,
    build_default_catalog,
    default_nodes,
    override_devices,
)
from disaggsim.errors import ConfigError
from disaggsim.failures import FailureProfile, RecoveryModel
from disaggsim.model import (
    ModelSpec,
    default_preprocess_cost,
    make_generation,
    rm1_series,
    rm2_series,
    single_table_model,
    synth_tables,
)
from disaggsim.perfmodel import PerfParams
from disaggsim.unit import Scheduler
from disaggsim.workload import LoadCurve, SizeDistribution, diurnal_curve


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    source: Literal["series", "synthetic", "single_table", "explicit"] = "series"
    series: Literal["rm1", "rm2"] = "rm1"
    generation: int = Field(0, ge=0)
    generations: Optional[list[int]] = None
    n_tables: Optional[int] = Field(None, ge=1)
    seed: int = 1
    total_tib: float = Field(1.4, gt=0)
    table_gib: float = Field(1.0, gt=0)
    dense_gflops: Optional[float] = Field(None, gt=0)
    preprocess_us_per_lookup: float = Field(0.01, ge=0)
    spec: Optional[dict[str, Any]] = None


class UnitSection(_Strict):
    deployment: Deployment = Deployment.DISAGGREGATED
    cn: str = "cn_4gpu"
    n_cns: int = Field(2, ge=1)
    mn: str = "ddr_mn"
    m_mns: int = Field(4, ge=1)
    intra_unit_bandwidth_gibps: float = Field(0.0, ge=0)


class HardwareSection(_Strict):
    catalog_overrides: dict[str, dict[str, Any]] = Field(default_factory=dict)
    so1s_nics: int = Field(2, ge=1)
    unit: UnitSection = UnitSection()


class WorkloadSection(_Strict):
    peak_qps: float = Field(20_000.0, gt=0)
    trough_ratio: float = Field(0.5, gt=0, le=1)
    interval_s: float = Field(600.0, gt=0)
    size_kind: Literal["lognormal", "constant"] = "lognormal"
    size_mu: float = math.log(32.0)
    size_sigma: float = Field(1.2, ge=0)
    size_low: int = Field(1, ge=1)
    size_high: int = Field(4096, ge=1)
    size_value: int = Field(32, ge=1)
    seed: int = Field(0, ge=0)
    trace_rate_qps: Optional[float] = Field(None, gt=0)
    trace_queries: int = Field(2000, ge=1)
    max_wait_us: float = Field(2000.0, ge=0)


class SimulationSection(_Strict):
    batch_candidates: list[int] = [32, 64, 128, 256, 512]
    probe_queries: int = Field(400, ge=10)
    rate_points: int = Field(120, ge=2)
    plateau_eps: float = Field(0.01, ge=0)
    max_batch: int = Field(128, ge=1)
    record_events: bool = False
    compare_schedulers: bool = False
    gpu_effective_tflops: float = Field(20.0, gt=0)
    per_message_latency_us: float = Field(2.0, ge=0)
    mn_concurrency: int = Field(0, ge=0)

    @field_validator("batch_candidates")
    @classmethod
    def _non_empty(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 1:
            raise ValueError("batch_candidates must be non-empty positive integers")
        return v


class InjectedFailure(_Strict):
    node_id: str
    time_s: float = Field(ge=0)


class FailureSection(_Strict):
    gpu_pct: float = Field(7.0, ge=0, le=100)
    cpu_pct: float = Field(0.4, ge=0, le=100)
    mn_pct: float = Field(0.04, ge=0, le=100)
    migrate_delay_s: float = Field(30.0, ge=0)
    reinit_delay_s: float = Field(600.0, ge=0)
    routing_update_delay_s: float = Field(5.0, ge=0)
    random_days: int = Field(0, ge=0)
    inject: list[InjectedFailure] = Field(default_factory=list)


class CapacitySection(_Strict):
    r_pct: float = Field(10.0, ge=0)
    electricity_usd_per_kwh: float = Field(0.10, ge=0)
    horizon_years: float = Field(3.0, gt=0)


class GridSection(_Strict):
    n_range: list[int] = [1, 2, 3, 4, 5, 6, 7, 8]
    m_range: list[int] = [1, 2, 3, 4, 5, 6, 7, 8]
    monolithic_server: Optional[str] = "so1s_1gpu"


class OptionSection(_Strict):
    name: str
    deployment: Deployment
    cn: str
    mn: Optional[str] = None
    n_range: list[int] = [1, 2, 3, 4]
    m_range: list[int] = [1, 2, 3, 4]


class ScenarioSection(_Strict):
    name: str
    baseline: OptionSection
    candidate: OptionSection


class CompareSection(_Strict):
    scenarios: list[ScenarioSection] = Field(default_factory=list)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    model: ModelSection = ModelSection()
    hardware: HardwareSection = HardwareSection()
    workload: WorkloadSection = WorkloadSection()
    # null means no latency target
    sla_us: Optional[float] = Field(100_000.0, gt=0)
    scheduler: Scheduler = Scheduler.SEQUENTIAL
    simulation: SimulationSection = SimulationSection()
    failure: FailureSection = FailureSection()
    capacity: CapacitySection = CapacitySection()
    grid: GridSection = GridSection()
    compare: CompareSection = CompareSection()

    # -- builders ------------------------------------------------------

    @property
    def sla(self) -> float:
        return math.inf if self.sla_us is None else self.sla_us

    def catalog(self):
        cat = build_default_catalog()
        if self.hardware.catalog_overrides:
            cat = override_devices(cat, self.hardware.catalog_overrides)
        return cat

    def nodes(self) -> dict[str, NodeConfig]:
        return default_nodes(self.catalog(), self.hardware.so1s_nics)

    def node(self, name: str) -> NodeConfig:
        nodes = self.nodes()
        if name not in nodes:
            raise ConfigError(f"unknown node preset {name!r}; known: {sorted(nodes)}")
        return nodes[name]

    def unit_config(self) -> ServingUnitConfig:
        u = self.hardware.unit
        if u.deployment.is_monolithic:
            cfg = ServingUnitConfig.monolithic(self.node(u.cn), u.n_cns, u.deployment)
        else:
            cfg = ServingUnitConfig(self.node(u.cn), u.n_cns, self.node(u.mn), u.m_mns, u.deployment)
        if u.intra_unit_bandwidth_gibps:
            cfg = ServingUnitConfig(cfg.cn, cfg.n_cns, cfg.mn, cfg.m_mns, cfg.deployment,
                                    u.intra_unit_bandwidth_gibps)
        return cfg

    def models(self) -> list[ModelSpec]:
        gens = self.model.generations
        if gens is None:
            return [self.build_model(self.model.generation)]
        return [self.build_model(g) for g in gens]

    def build_model(self, generation: int | None = None) -> ModelSpec:
        ms = self.model
        k = ms.generation if generation is None else generation
        if ms.source == "explicit":
            if ms.spec is None:
                raise ConfigError("model.source 'explicit' needs model.spec")
            model = ModelSpec.from_dict(ms.spec)
        elif ms.source == "single_table":
            model = single_table_model(int(ms.table_gib * GIB))
        elif ms.source == "synthetic":
            tables = synth_tables(ms.total_tib * TIB, ms.n_tables or 100, seed=ms.seed)
            model = ModelSpec(f"synthetic-{ms.total_tib:g}TB", tuple(tables), ms.dense_gflops or 0.02,
                              default_preprocess_cost(tables, ms.preprocess_us_per_lookup))
        else:
            maker = rm1_series if ms.series == "rm1" else rm2_series
            kwargs = {"seed": ms.seed}
            if ms.n_tables:
                kwargs["n_tables"] = ms.n_tables
            series = maker(**kwargs)
            base = series.base
            base = ModelSpec(base.model_id, base.tables, base.dense_gflops_per_sample,
                             default_preprocess_cost(base.tables, ms.preprocess_us_per_lookup))
            series = type(series)(base, series.num_generations, series.sparse_growth_total,
                                  series.dense_growth_total, series.name)
            model = make_generation(series, k)
        if ms.dense_gflops is not None and ms.source != "synthetic":
            model = ModelSpec(model.model_id, model.tables, ms.dense_gflops, model.preprocess_cost_us_per_sample)
        return model

    def perf(self) -> PerfParams:
        s = self.simulation
        return PerfParams(gpu_effective_tflops=s.gpu_effective_tflops,
                          per_message_latency_us=s.per_message_latency_us, mn_concurrency=s.mn_concurrency)

    def size_dist(self) -> SizeDistribution:
        w = self.workload
        return SizeDistribution(w.size_kind, w.size_mu, w.size_sigma, w.size_low, w.size_high, w.size_value)

    def load_curve(self) -> LoadCurve:
        w = self.workload
        return diurnal_curve(w.peak_qps, w.trough_ratio, w.interval_s)

    def sim_settings(self, scheduler: Scheduler | None = None) -> SimSettings:
        s = self.simulation
        return SimSettings(self.sla, tuple(s.batch_candidates), self.size_dist(), s.probe_queries,
                           self.workload.max_wait_us, self.workload.seed, s.rate_points, s.plateau_eps,
                           scheduler or self.scheduler, self.perf())

    def cost_rates(self) -> CostRates:
        f, c = self.failure, self.capacity
        return CostRates(c.r_pct, f.gpu_pct, f.cpu_pct, f.mn_pct, c.electricity_usd_per_kwh, c.horizon_years)

    def failure_profile(self, recovery: RecoveryModel, pct: float) -> FailureProfile:
        f = self.failure
        return FailureProfile(pct / 100.0, recovery, f.migrate_delay_s, f.reinit_delay_s, f.routing_update_delay_s)

    def option(self, o: OptionSection) -> DeploymentOption:
        return DeploymentOption(o.name, o.deployment, self.node(o.cn), self.node(o.mn) if o.mn else None,
                                tuple(o.n_range), tuple(o.m_range))


# -- presets -----------------------------------------------------------

_RM1_SMALL = {"source": "series", "series": "rm1", "n_tables": 100}

PRESETS: dict[str, dict[str, Any]] = {
    "rm1v0-2cn4mn": {
        "name": "rm1v0-2cn4mn",
        "model": {"source": "series", "series": "rm1", "generation": 0},
        "hardware": {"unit": {"cn": "cn_4gpu", "n_cns": 2, "mn": "ddr_mn", "m_mns": 4}},
        "simulation": {"batch_candidates": [64, 128, 256, 512], "probe_queries": 300, "rate_points": 60},
    },
    "fig7d": {
        "name": "fig7d",
        "model": {"source": "series", "series": "rm1", "generation": 0},
        "hardware": {"unit": {"cn": "cn_4gpu", "n_cns": 1, "mn": "ddr_mn", "m_mns": 8}},
    },
    "fig8b": {
        "name": "fig8b",
        "model": dict(_RM1_SMALL),
        "sla_us": 250_000.0,
        "hardware": {"unit": {"cn": "cn_4gpu", "n_cns": 2, "mn": "ddr_mn", "m_mns": 2}},
        "simulation": {"compare_schedulers": True, "batch_candidates": [64, 128, 256, 512],
                       "probe_queries": 300, "rate_points": 60},
    },
    "fig10": {
        "name": "fig10",
        "model": dict(_RM1_SMALL),
        "grid": {"monolithic_server": "so1s_1gpu"},
        "hardware": {"unit": {"cn": "cn_1gpu", "mn": "ddr_mn"}},
        "simulation": {"batch_candidates": [64, 128, 256, 512], "probe_queries": 300, "rate_points": 60},
    },
    "fig11": {
        "name": "fig11",
        "model": dict(_RM1_SMALL, generations=[0, 1, 2, 3, 4, 5]),
        "simulation": {"batch_candidates": [64, 128, 256], "probe_queries": 200, "rate_points": 40},
        "compare": {"scenarios": [
            {"name": "so1s-vs-ddr-mn",
             "baseline": {"name": "SO-1S", "deployment": "monolithic_scale_out", "cn": "so1s_4gpu",
                          "n_range": [1, 2, 4, 8]},
             "candidate": {"name": "CN+DDR-MN", "deployment": "disaggregated", "cn": "cn_1gpu",
                           "mn": "ddr_mn", "n_range": [1, 2], "m_range": [2, 4, 6, 8]}},
            {"name": "so1s-nmp-vs-nmp-mn",
             "baseline": {"name": "SO-1S-NMP", "deployment": "monolithic_scale_out", "cn": "so1s_4gpu_nmp",
                          "n_range": [1, 2, 4, 8]},
             "candidate": {"name": "CN+NMP-MN", "deployment": "disaggregated", "cn": "cn_1gpu",
                           "mn": "nmp_mn", "n_range": [1, 2], "m_range": [2, 4, 6, 8]}},
        ]},
    },
    "fig12": {
        "name": "fig12",
        "model": {"source": "series", "series": "rm2", "n_tables": 50, "generations": [0, 1, 2, 3, 4, 5]},
        "simulation": {"batch_candidates": [64, 128, 256], "probe_queries": 200, "rate_points": 40},
        "compare": {"scenarios": [
            {"name": "so1s-vs-disaggregated",
             "baseline": {"name": "SO-1S", "deployment": "monolithic_scale_out", "cn": "so1s_4gpu",
                          "n_range": [1, 2, 4]},
             "candidate": {"name": "CN+DDR-MN", "deployment": "disaggregated", "cn": "cn_4gpu",
                           "mn": "ddr_mn", "n_range": [1, 2, 4], "m_range": [1, 2, 4]}},
        ]},
    },
    "memory-bound": {
        "name": "memory-bound",
        "model": {"source": "synthetic", "total_tib": 1.5, "n_tables": 60, "seed": 9,
                  "dense_gflops": 0.005, "preprocess_us_per_lookup": 0.002},
        "hardware": {"unit": {"cn": "cn_1gpu", "mn": "ddr_mn"}},
        "grid": {"monolithic_server": "so1s_1gpu"},
        "simulation": {"batch_candidates": [64, 128, 256, 512], "probe_queries": 300, "rate_points": 60},
    },
    "place-1table-2mn": {
        "name": "place-1table-2mn",
        "model": {"source": "single_table", "table_gib": 1.0},
        "hardware": {"unit": {"cn": "cn_1gpu", "n_cns": 1, "mn": "ddr_mn", "m_mns": 2}},
    },
    "compare-identity": {
        "name": "compare-identity",
        "model": {"source": "single_table", "table_gib": 64.0},
        "simulation": {"batch_candidates": [64, 128], "probe_queries": 200, "rate_points": 40},
        "compare": {"scenarios": [
            {"name": "identity",
             "baseline": {"name": "SO-1S", "deployment": "monolithic_scale_out", "cn": "so1s_1gpu",
                          "n_range": [1, 2]},
             "candidate": {"name": "SO-1S", "deployment": "monolithic_scale_out", "cn": "so1s_1gpu",
                           "n_range": [1, 2]}},
        ]},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Preset, then file, then ``overrides``; later layers win key by key."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        data = _merge(data, loaded)
    if overrides:
        data = _merge(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
