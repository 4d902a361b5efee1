"""Failure-aware unit counts, TCO, and the {n CNs x m MNs} optimizer."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

from disaggsim.catalog import (
    Catalog,
    Deployment,
    FailureClass,
    NodeConfig,
    ServingUnitConfig,
    build_default_catalog,
)
from disaggsim.errors import CapacityError, InfeasibleError
from disaggsim.model import ModelSpec
from disaggsim.perfmodel import PerfParams
from disaggsim.simcore import HillClimbResult, characterize
from disaggsim.unit import Scheduler, build_unit
from disaggsim.workload import LoadCurve, SizeDistribution

log = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760


@dataclass(frozen=True)
class CharacterizationEntry:
    model_id: str
    unit_config_id: str
    qps: float
    peak_power_w: float
    best_batch: int | None

    def __post_init__(self) -> None:
        if self.qps < 0:
            raise ValueError("qps must be >= 0")


@dataclass(frozen=True)
class CostRates:
    """Over-provisioning percentages and electricity price.

    Failure rates are daily percentages per failure class.
    """

    r_pct: float = 10.0
    gpu_pct: float = 7.0
    cpu_pct: float = 0.4
    mn_pct: float = 0.04
    electricity_usd_per_kwh: float = 0.10
    horizon_years: float = 3.0

    def pct(self, cls: FailureClass) -> float:
        return {FailureClass.GPU: self.gpu_pct, FailureClass.CPU: self.cpu_pct,
                FailureClass.MN: self.mn_pct}[cls]

    def unit_rates(self, config: ServingUnitConfig) -> tuple[float, float]:
        """(F_CN%, F_MN%) for a unit; monolithic servers carry one rate for both roles."""
        if config.deployment.is_monolithic:
            f = self.pct(config.cn.failure_class)
            return f, f
        return self.pct(config.cn.failure_class), self.pct(config.mn.failure_class)


@dataclass
class AllocationPlan:
    n_t: list[int]
    n_peak: int
    p_t: list[float]
    r_pct: float
    tco_usd: float
    capex_usd: float
    opex_usd: float

    def to_dict(self) -> dict:
        return {
            "n_t": self.n_t, "n_peak": self.n_peak, "p_t": self.p_t, "r_pct": self.r_pct,
            "tco_usd": self.tco_usd, "capex_usd": self.capex_usd, "opex_usd": self.opex_usd,
        }


def _frac(x: float | int) -> Fraction:
    # str() keeps decimal inputs like 0.04 exact instead of their binary expansion
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def required_units(load_t: LoadCurve | Sequence[float], entry: CharacterizationEntry | float, r_pct: float,
                   f_cn_pct: float, f_mn_pct: float, n: int, m: int,
                   load_peak: float | None = None) -> list[int]:
    """Serving units needed per interval: load with R% headroom plus expected failures at peak."""
    qps = entry.qps if isinstance(entry, CharacterizationEntry) else entry
    if qps <= 0:
        raise InfeasibleError("unit sustains 0 QPS under the SLA; no unit count can serve the load")
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    loads = load_t.rates_qps if isinstance(load_t, LoadCurve) else tuple(load_t)
    peak = _frac(load_peak if load_peak is not None else max(loads, default=0.0))
    q = _frac(qps)
    headroom = 1 + _frac(r_pct) / 100
    fail = (_frac(f_cn_pct) * n + _frac(f_mn_pct) * m) / (n + m) / 100
    spare = fail * peak / q
    return [math.ceil(headroom * _frac(x) / q + spare) for x in loads]


def plan_tco(load_t: LoadCurve, entry: CharacterizationEntry, unit_capex: float, r_pct: float = 10.0,
             f_cn_pct: float = 7.0, f_mn_pct: float = 0.04, n: int = 1, m: int = 1,
             horizon_years: float = 3.0, electricity_usd_per_kwh: float = 0.10) -> AllocationPlan:
    """Capex for the peak unit count plus electricity for the daily curve tiled over the horizon."""
    n_t = required_units(load_t, entry, r_pct, f_cn_pct, f_mn_pct, n, m)
    n_peak = max(n_t, default=0)
    p_t = [entry.peak_power_w * k for k in n_t]
    interval_h = load_t.interval_s / 3600.0
    curve_h = interval_h * len(n_t)
    repeats = horizon_years * HOURS_PER_YEAR / curve_h if curve_h else 0.0
    energy_kwh = sum(p * interval_h for p in p_t) / 1000.0 * repeats
    capex = n_peak * unit_capex
    opex = energy_kwh * electricity_usd_per_kwh
    return AllocationPlan(n_t, n_peak, p_t, r_pct, capex + opex, capex, opex)


# -- characterization + grid -------------------------------------------

@dataclass(frozen=True)
class SimSettings:
    """How a unit is characterized by simulation."""

    sla_us: float = 100_000.0
    batch_candidates: tuple[int, ...] = (32, 64, 128, 256, 512)
    size_dist: SizeDistribution = field(default_factory=SizeDistribution)
    n_queries: int = 400
    max_wait_us: float = 2000.0
    seed: int = 0
    rate_points: int = 120
    plateau_eps: float = 0.01
    scheduler: Scheduler = Scheduler.SEQUENTIAL
    perf: PerfParams = field(default_factory=PerfParams)


def unit_config_id(config: ServingUnitConfig) -> str:
    if config.deployment.is_monolithic:
        return f"{config.deployment.value}:{config.cn.node_id}x{config.n_cns}"
    return f"{config.cn.node_id}x{config.n_cns}+{config.mn.node_id}x{config.m_mns}"


def hill_climb_unit(model: ModelSpec, config: ServingUnitConfig, settings: SimSettings,
                    catalog: Catalog | None = None) -> HillClimbResult:
    catalog = catalog if catalog is not None else build_default_catalog()

    def factory():
        return build_unit(model, config, settings.scheduler, settings.perf, catalog)

    return characterize(factory, settings.sla_us, settings.batch_candidates, settings.size_dist,
                        settings.n_queries, settings.max_wait_us, settings.seed, settings.rate_points,
                        settings.plateau_eps)


def entry_from(hc: HillClimbResult, model: ModelSpec, config: ServingUnitConfig,
               catalog: Catalog) -> CharacterizationEntry:
    """Power is the unit's average draw while serving at its latency-bounded rate."""
    if hc.best_result is not None:
        power = hc.best_result.avg_power_w
    else:
        log.info("%s: %s", unit_config_id(config), hc.diagnostic)
        power = config.peak_power(catalog)
    return CharacterizationEntry(model.model_id, unit_config_id(config), hc.best_qps, power, hc.best_batch)


def characterize_unit(model: ModelSpec, config: ServingUnitConfig, settings: SimSettings,
                      catalog: Catalog | None = None) -> CharacterizationEntry:
    catalog = catalog if catalog is not None else build_default_catalog()
    return entry_from(hill_climb_unit(model, config, settings, catalog), model, config, catalog)


@dataclass
class CellResult:
    n_cns: int
    m_mns: int
    feasible: bool
    qps: float = 0.0
    power_w: float = 0.0
    tco_usd: float = math.inf
    capex_usd: float = 0.0
    opex_usd: float = 0.0
    n_peak: int = 0
    best_batch: int | None = None
    unit_capex_usd: float = 0.0
    note: str = ""

    @property
    def total_nodes(self) -> int:
        return self.n_cns + self.m_mns


@dataclass
class GridResult:
    cells: dict[tuple[int, int], CellResult]
    optimum: tuple[int, int]
    monolithic: bool = False
    entries: dict[tuple[int, int], CharacterizationEntry] = field(default_factory=dict)
    configs: dict[tuple[int, int], ServingUnitConfig] = field(default_factory=dict)

    @property
    def best(self) -> CellResult:
        return self.cells[self.optimum]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "m", "qps", "power_w", "tco_usd"])
        for (n, m), c in sorted(self.cells.items()):
            if c.feasible:
                w.writerow([n, m, f"{c.qps:.6g}", f"{c.power_w:.6g}", f"{c.tco_usd:.2f}"])
            else:
                w.writerow([n, m, "", "", ""])
        return buf.getvalue()


def _pick_optimum(cells: dict[tuple[int, int], CellResult], monolithic: bool) -> tuple[int, int]:
    feasible = [c for c in cells.values() if c.feasible and math.isfinite(c.tco_usd)]
    if not feasible:
        notes = "; ".join(sorted({c.note for c in cells.values() if c.note}))
        raise CapacityError(f"no feasible cell: {notes}")
    best = min(feasible, key=lambda c: (c.tco_usd, c.n_cns if monolithic else c.total_nodes, c.n_cns, c.m_mns))
    return best.n_cns, best.m_mns


def _cost_cell(cell: CellResult, entry: CharacterizationEntry, config: ServingUnitConfig,
               load: LoadCurve, rates: CostRates, catalog: Catalog) -> CellResult:
    f_cn, f_mn = rates.unit_rates(config)
    capex_unit = config.capex(catalog)
    if entry.qps <= 0:
        return replace(cell, feasible=False, qps=0.0, power_w=entry.peak_power_w, best_batch=entry.best_batch,
                       unit_capex_usd=capex_unit, note="SLA not met at any rate")
    plan = plan_tco(load, entry, capex_unit, rates.r_pct, f_cn, f_mn, config.n_cns, config.m_mns,
                    rates.horizon_years, rates.electricity_usd_per_kwh)
    return replace(cell, feasible=True, qps=entry.qps, power_w=entry.peak_power_w, tco_usd=plan.tco_usd,
                   capex_usd=plan.capex_usd, opex_usd=plan.opex_usd, n_peak=plan.n_peak,
                   best_batch=entry.best_batch, unit_capex_usd=capex_unit)


def _characterize_job(args) -> CharacterizationEntry | str:
    model, config, settings, catalog = args
    try:
        return characterize_unit(model, config, settings, catalog)
    except InfeasibleError as exc:
        return str(exc)


def _unit_configs(cn_cfg: NodeConfig, mn_cfg: NodeConfig | None, n_range: Sequence[int],
                  m_range: Sequence[int], deployment: Deployment) -> dict[tuple[int, int], ServingUnitConfig]:
    out = {}
    if deployment.is_monolithic:
        for k in n_range:
            out[k, k] = ServingUnitConfig.monolithic(cn_cfg, k, deployment)
        return out
    for n in n_range:
        for m in m_range:
            out[n, m] = ServingUnitConfig(cn_cfg, n, mn_cfg, m, deployment)
    return out


def grid_optimize(model: ModelSpec, cn_cfg: NodeConfig, mn_cfg: NodeConfig | None, n_range: Sequence[int],
                  m_range: Sequence[int], settings: SimSettings, load: LoadCurve, rates: CostRates = CostRates(),
                  catalog: Catalog | None = None, deployment: Deployment = Deployment.DISAGGREGATED,
                  workers: int = 1) -> GridResult:
    """Characterize and cost every cell; the optimum is the cheapest feasible cell.

    Ties go to fewer total nodes, then fewer CNs. For monolithic deployments
    only the diagonal ``k`` servers is evaluated (``m_range`` ignored).
    """
    catalog = catalog if catalog is not None else build_default_catalog()
    configs = _unit_configs(cn_cfg, mn_cfg, n_range, m_range, deployment)
    cells: dict[tuple[int, int], CellResult] = {}
    jobs = []
    for key, cfg in sorted(configs.items()):
        have = cfg.memory_bytes()
        if have < model.total_sparse_bytes:
            cells[key] = CellResult(*key, feasible=False,
                                    note=f"capacity shortfall {model.total_sparse_bytes - have} bytes")
        else:
            jobs.append((key, cfg))
    args = [(model, cfg, settings, catalog) for _, cfg in jobs]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_characterize_job, args))
    else:
        entries = [_characterize_job(a) for a in args]
    result = GridResult(cells, (0, 0), deployment.is_monolithic, configs=configs)
    for (key, cfg), entry in zip(jobs, entries):
        if isinstance(entry, str):
            cells[key] = CellResult(*key, feasible=False, note=entry)
            continue
        result.entries[key] = entry
        cells[key] = _cost_cell(CellResult(*key, feasible=True), entry, cfg, load, rates, catalog)
    result.optimum = _pick_optimum(cells, deployment.is_monolithic)
    return result


def recost(grid: GridResult, load: LoadCurve, rates: CostRates, catalog: Catalog | None = None) -> GridResult:
    """Same characterizations, different cost inputs."""
    catalog = catalog if catalog is not None else build_default_catalog()
    cells = dict(grid.cells)
    for key, entry in grid.entries.items():
        cells[key] = _cost_cell(CellResult(*key, feasible=True), entry, grid.configs[key], load, rates, catalog)
    return GridResult(cells, _pick_optimum(cells, grid.monolithic), grid.monolithic, grid.entries, grid.configs)


# -- deployment comparison ---------------------------------------------

@dataclass(frozen=True)
class DeploymentOption:
    name: str
    deployment: Deployment
    cn: NodeConfig
    mn: NodeConfig | None = None
    n_range: tuple[int, ...] = (1, 2, 3, 4)
    m_range: tuple[int, ...] = (1, 2, 3, 4)


@dataclass(frozen=True)
class Scenario:
    name: str
    models: tuple[ModelSpec, ...]
    baseline: DeploymentOption
    candidate: DeploymentOption
    load: LoadCurve
    settings: SimSettings = field(default_factory=SimSettings)
    rates: CostRates = field(default_factory=CostRates)


@dataclass
class ComparisonRow:
    scenario: str
    model_id: str
    baseline_tco_usd: float
    candidate_tco_usd: float
    baseline_cell: tuple[int, int]
    candidate_cell: tuple[int, int]
    savings_pct: float
    failure_share_usd: float
    utilization_share_usd: float
    cumulative_baseline_usd: float
    cumulative_candidate_usd: float

    @property
    def cumulative_savings_pct(self) -> float:
        b = self.cumulative_baseline_usd
        return 100.0 * (b - self.cumulative_candidate_usd) / b if b else 0.0


def _optimize_option(opt: DeploymentOption, model: ModelSpec, sc: Scenario, catalog: Catalog,
                     workers: int) -> GridResult:
    return grid_optimize(model, opt.cn, opt.mn, opt.n_range, opt.m_range, sc.settings, sc.load, sc.rates,
                         catalog, opt.deployment, workers)


def failure_share(grid: GridResult, config: ServingUnitConfig, load: LoadCurve, rates: CostRates,
                  catalog: Catalog | None = None) -> float:
    """TCO added when memory roles fail as often as compute roles."""
    f_cn, _ = rates.unit_rates(config)
    if config.deployment.is_monolithic:
        return 0.0
    equal = replace(rates, mn_pct=f_cn) if config.mn.failure_class is FailureClass.MN else rates
    return recost(grid, load, equal, catalog).best.tco_usd - grid.best.tco_usd


def compare_deployments(scenarios: Sequence[Scenario], catalog: Catalog | None = None,
                        workers: int = 1) -> list[ComparisonRow]:
    """Per-generation TCO of a baseline and a candidate deployment, with the savings split."""
    catalog = catalog if catalog is not None else build_default_catalog()
    rows = []
    for sc in scenarios:
        cum_b = cum_c = 0.0
        for model in sc.models:
            gb = _optimize_option(sc.baseline, model, sc, catalog, workers)
            gc = gb if sc.candidate == sc.baseline else _optimize_option(sc.candidate, model, sc, catalog, workers)
            tb, tc = gb.best.tco_usd, gc.best.tco_usd
            share = failure_share(gc, gc.configs[gc.optimum], sc.load, sc.rates, catalog)
            cum_b += tb
            cum_c += tc
            rows.append(ComparisonRow(
                sc.name, model.model_id, tb, tc, gb.optimum, gc.optimum,
                100.0 * (tb - tc) / tb if tb else 0.0,
                share, (tb - tc) - share, cum_b, cum_c,
            ))
    return rows


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "model_id", "baseline_cell", "candidate_cell", "baseline_tco_usd",
                "candidate_tco_usd", "savings_pct", "failure_share_usd", "utilization_share_usd",
                "cumulative_savings_pct"])
    for r in rows:
        w.writerow([r.scenario, r.model_id, f"{r.baseline_cell[0]}x{r.baseline_cell[1]}",
                    f"{r.candidate_cell[0]}x{r.candidate_cell[1]}", f"{r.baseline_tco_usd:.2f}",
                    f"{r.candidate_tco_usd:.2f}", f"{r.savings_pct:.4f}", f"{r.failure_share_usd:.2f}",
                    f"{r.utilization_share_usd:.2f}", f"{r.cumulative_savings_pct:.4f}"])
    return buf.getvalue()
