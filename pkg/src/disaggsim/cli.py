"""Simulate and size disaggregated recommendation-serving units.

Exit codes: 0 success, 1 other simulator error, 2 bad configuration,
3 infeasible request (capacity/placement), 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable

from disaggsim import __version__
from disaggsim import capacity as cap
from disaggsim import failures as fl
from disaggsim.catalog import Deployment, FailureClass
from disaggsim.config import PRESETS, ExperimentConfig, load_config
from disaggsim.errors import ConfigError, DisaggSimError
from disaggsim.placement import coefficient_of_variation, random_allocate_route
from disaggsim.simcore import run
from disaggsim.unit import Scheduler, build_unit
from disaggsim.workload import LoadCurve, gen_trace, trace_to_csv

log = logging.getLogger("disaggsim")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 1, 2, 3, 4


def _clean(obj: Any) -> Any:
    """JSON-safe copy: non-finite floats become null, tuples become lists."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


class Output:
    """Atomic, deterministic writer rooted at the output directory."""

    def __init__(self, root: Path, manifest: dict):
        self.root = root
        self.manifest = manifest
        self.digest = hashlib.sha256(dumps(manifest).encode()).hexdigest()
        self.written: list[str] = []

    def write_text(self, name: str, text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, self.root / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(name)

    def json(self, name: str, result: Any) -> None:
        self.write_text(name, dumps({"manifest": self.manifest, "result": result}))

    def csv(self, name: str, header: list[str], rows: list[list[Any]]) -> None:
        buf = io.StringIO()
        buf.write(f"# manifest sha256 {self.digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.write_text(name, buf.getvalue())

    def raw_csv(self, name: str, text: str) -> None:
        self.write_text(name, f"# manifest sha256 {self.digest}\n" + text)


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else ""


# -- commands ------------------------------------------------------------

def _schedulers(cfg: ExperimentConfig) -> list[Scheduler]:
    if cfg.simulation.compare_schedulers:
        return [Scheduler.SEQUENTIAL, Scheduler.INTERLEAVED]
    return [cfg.scheduler]


def cmd_characterize(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    catalog = cfg.catalog()
    unit = cfg.unit_config()
    entries = []
    for model in cfg.models():
        for sched in _schedulers(cfg):
            hc = cap.hill_climb_unit(model, unit, cfg.sim_settings(sched), catalog)
            entry = cap.entry_from(hc, model, unit, catalog)
            entries.append({
                **asdict(entry),
                "scheduler": sched.value,
                "sla_us": cfg.sla,
                "qps_by_batch": {str(b): q for b, q in sorted(hc.qps_by_batch.items())},
                "diagnostic": hc.diagnostic,
            })
    out.json("characterization.json", {"entries": entries})
    return "\n".join(f"{e['model_id']} {e['unit_config_id']} [{e['scheduler']}]: qps={e['qps']:.1f} "
                     f"batch={e['best_batch']}" + (f" ({e['diagnostic']})" if e["diagnostic"] else "")
                     for e in entries)


def cmd_place(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    model = cfg.build_model()
    unit = cfg.unit_config()
    state = build_unit(model, unit, cfg.scheduler, cfg.perf(), cfg.catalog())
    tables = model.tables
    mns = state.mn_capacities()
    greedy_load = state.routing.recompute_load(tables, mns)
    rplan, rroute = random_allocate_route(tables, mns, state.placement.n_replicas, cfg.workload.seed,
                                          state.task_ids)
    random_load = rroute.recompute_load(tables, mns)
    max_w = max(t.access_weight for t in tables)

    def stats(load: dict[int, float]) -> dict:
        return {"routed_load": {str(k): v for k, v in sorted(load.items())},
                "cv": coefficient_of_variation(load.values()),
                "spread": max(load.values()) - min(load.values())}

    placed = state.placement.placed_bytes(tables)
    result = {
        "model_id": model.model_id,
        "unit_config_id": cap.unit_config_id(unit),
        "placement": state.placement.to_dict(),
        "placed_bytes": {str(k): v for k, v in sorted(placed.items())},
        "routing": state.routing.to_dict(),
        "greedy": stats(greedy_load),
        "random": stats(random_load),
        "max_access_weight": max_w,
    }
    out.json("placement.json", result)
    out.csv("routed_load.csv", ["mn", "placed_bytes", "greedy_load", "random_load"],
            [[m, placed[m], _fmt(greedy_load[m]), _fmt(random_load[m])] for m in sorted(mns)])
    return (f"n_replicas={state.placement.n_replicas} greedy cv={result['greedy']['cv']:.4f} "
            f"random cv={result['random']['cv']:.4f}")


def _failure_trace(cfg: ExperimentConfig, state) -> tuple[fl.FailureTrace, dict[str, fl.FailureProfile]]:
    f = cfg.failure
    profiles = fl.unit_profiles(state, {
        FailureClass.GPU: f.gpu_pct / 100, FailureClass.CPU: f.cpu_pct / 100,
        FailureClass.MN: f.mn_pct / 100,
    }, migrate_delay_s=f.migrate_delay_s, reinit_delay_s=f.reinit_delay_s,
        routing_update_delay_s=f.routing_update_delay_s)
    events: list[fl.FailureEvent] = []
    if f.random_days:
        events.extend(fl.gen_failure_trace(profiles, f.random_days, cfg.workload.seed).events)
    for inj in f.inject:
        if inj.node_id not in profiles:
            raise ConfigError(f"failure.inject names unknown node {inj.node_id!r}; "
                              f"unit nodes: {sorted(profiles)}")
        t = inj.time_s * 1e6
        events.append(fl.FailureEvent(t, inj.node_id, "fail"))
        events.append(fl.FailureEvent(t + profiles[inj.node_id].recovery_delay_s * 1e6, inj.node_id, "recover"))
    return fl.FailureTrace(events), profiles


def cmd_simulate(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    model = cfg.build_model()
    unit = cfg.unit_config()
    state = build_unit(model, unit, cfg.scheduler, cfg.perf(), cfg.catalog())
    w = cfg.workload
    sd = cfg.size_dist()
    rate = w.trace_rate_qps or 0.5 * state.capacity_qps(cfg.simulation.max_batch, sd.mean())
    trace = gen_trace(LoadCurve.constant(rate, w.trace_queries / rate), sd, w.seed)
    ftrace, profiles = _failure_trace(cfg, state)
    res = run(state, trace, cfg.sla, cfg.simulation.max_batch, w.max_wait_us, failure_trace=ftrace,
              failure_profiles=profiles, record_events=cfg.simulation.record_events)
    summary = res.to_dict(include_latencies=False)
    summary.update({"model_id": model.model_id, "unit_config_id": cap.unit_config_id(unit),
                    "trace_rate_qps": rate, "sla_met": res.p95_latency_us <= cfg.sla,
                    "failures_injected": ftrace.fail_count()})
    out.json("sim_result.json", summary)
    by_id = {q.query_id: q for q in trace}
    out.csv("latencies.csv", ["query_id", "arrival_time_us", "num_samples", "latency_us"],
            [[i, repr(by_id[i].arrival_time_us), by_id[i].num_samples, _fmt(l)]
             for i, l in zip(res.query_ids, res.per_query_latency_us)])
    out.csv("routing_log.csv", ["time_us", "reason", "digest"],
            [[repr(t), why, d] for t, why, d in res.routing_log])
    out.raw_csv("trace.csv", trace_to_csv(trace))
    out.raw_csv("failure_trace.csv", ftrace.to_csv())
    if cfg.simulation.record_events:
        out.raw_csv("event_log.csv", res.event_log_csv())
    return (f"{len(trace)} queries at {rate:.1f} qps: p95={res.p95_latency_us / 1000:.3f} ms "
            f"achieved={res.achieved_qps:.1f} qps completed={res.n_completed}")


def cmd_plan(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    catalog = cfg.catalog()
    model = cfg.build_model()
    unit = cfg.unit_config()
    hc = cap.hill_climb_unit(model, unit, cfg.sim_settings(), catalog)
    entry = cap.entry_from(hc, model, unit, catalog)
    rates = cfg.cost_rates()
    f_cn, f_mn = rates.unit_rates(unit)
    load = cfg.load_curve()
    plan = cap.plan_tco(load, entry, unit.capex(catalog), rates.r_pct, f_cn, f_mn, unit.n_cns, unit.m_mns,
                        rates.horizon_years, rates.electricity_usd_per_kwh)
    out.json("plan.json", {"entry": asdict(entry), "unit_capex_usd": unit.capex(catalog),
                           "f_cn_pct": f_cn, "f_mn_pct": f_mn, "plan": plan.to_dict()})
    out.csv("plan.csv", ["interval", "load_qps", "n_t", "p_t_w"],
            [[i, _fmt(x), n, _fmt(p)] for i, (x, n, p) in enumerate(zip(load.rates_qps, plan.n_t, plan.p_t))])
    return f"qps/unit={entry.qps:.1f} n_peak={plan.n_peak} tco=${plan.tco_usd:,.0f}"


def cmd_optimize(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    catalog = cfg.catalog()
    model = cfg.build_model()
    u = cfg.hardware.unit
    settings = cfg.sim_settings()
    load = cfg.load_curve()
    rates = cfg.cost_rates()
    grid = cap.grid_optimize(model, cfg.node(u.cn), cfg.node(u.mn), cfg.grid.n_range, cfg.grid.m_range,
                             settings, load, rates, catalog, Deployment.DISAGGREGATED, workers)
    out.raw_csv("grid.csv", grid.to_csv())
    share = cap.failure_share(grid, grid.configs[grid.optimum], load, rates, catalog)
    result: dict[str, Any] = {
        "model_id": model.model_id,
        "optimum": {"n_cns": grid.optimum[0], "m_mns": grid.optimum[1], **asdict(grid.best)},
        "failure_share_usd": share,
        "rates": asdict(rates),
    }
    text = f"optimum n={grid.optimum[0]} m={grid.optimum[1]} tco=${grid.best.tco_usd:,.0f}"
    if cfg.grid.monolithic_server:
        mono = cap.grid_optimize(model, cfg.node(cfg.grid.monolithic_server), None, cfg.grid.n_range, (),
                                 settings, load, rates, catalog, Deployment.MONOLITHIC_SCALE_OUT, workers)
        out.raw_csv("monolithic.csv", mono.to_csv())
        best = mono.best
        result["monolithic_best"] = {"servers": best.n_cns, **asdict(best)}
        result["savings_pct"] = 100.0 * (best.tco_usd - grid.best.tco_usd) / best.tco_usd
        text += f"; best monolithic k={best.n_cns} tco=${best.tco_usd:,.0f}"
    out.json("optimize.json", result)
    return text


def cmd_compare(cfg: ExperimentConfig, out: Output, workers: int) -> str:
    if not cfg.compare.scenarios:
        raise ConfigError("compare needs compare.scenarios")
    models = tuple(cfg.models())
    scenarios = [cap.Scenario(s.name, models, cfg.option(s.baseline), cfg.option(s.candidate),
                              cfg.load_curve(), cfg.sim_settings(), cfg.cost_rates())
                 for s in cfg.compare.scenarios]
    rows = cap.compare_deployments(scenarios, cfg.catalog(), workers)
    out.raw_csv("compare.csv", cap.comparison_csv(rows))
    out.json("compare.json", {"rows": [asdict(r) | {"cumulative_savings_pct": r.cumulative_savings_pct}
                                       for r in rows]})
    return "\n".join(f"{r.scenario} {r.model_id}: savings {r.savings_pct:.2f}% "
                     f"(failure share ${r.failure_share_usd:,.0f})" for r in rows)


COMMANDS: dict[str, Callable[[ExperimentConfig, Output, int], str]] = {
    "characterize": cmd_characterize,
    "place": cmd_place,
    "simulate": cmd_simulate,
    "plan": cmd_plan,
    "optimize": cmd_optimize,
    "compare": cmd_compare,
}


HELP = {
    "characterize": "latency-bounded QPS and power of the configured unit",
    "place": "replica placement and routing, greedy vs random",
    "simulate": "one trace through the unit, with optional failures",
    "plan": "units per interval and TCO for the daily load curve",
    "optimize": "cheapest {n CNs x m MNs} cell, with the monolithic baseline",
    "compare": "per-generation TCO of two deployment options",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disaggsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"disaggsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
        sp.add_argument("--seed", type=int, help="workload seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for grid cells")
    return p


def _setup_logging() -> None:
    level = os.environ.get("DISAGGSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        overrides = {"workload": {"seed": args.seed}} if args.seed is not None else None
        cfg = load_config(args.config, args.preset, overrides)
        manifest = {
            "tool": "disaggsim",
            "version": __version__,
            "command": args.command,
            "seed": cfg.workload.seed,
            "config": cfg.model_dump(mode="json"),
        }
        out = Output(args.out, manifest)
        out.write_text("manifest.json", dumps(manifest))
        summary = COMMANDS[args.command](cfg, out, args.threads)
    except DisaggSimError as exc:
        print(f"disaggsim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
