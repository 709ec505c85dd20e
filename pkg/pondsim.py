"""
pondsim.py
==========
Command-line front end: trace generation, model calibration, simulation runs,
pool-size / policy sweeps and report tables. Commands compose through files.

Usage
-----
  python pondsim.py gen-trace --config configs/trace.yaml --out data/trace.csv
  python pondsim.py calibrate --trace data/trace.csv --pdm 5 --out data/models.json
  python pondsim.py run --trace data/trace.csv --cluster configs/cluster.yaml \\
                        --policy pond:pdm=5,tp=98 --models data/models.json --seed 42 --out data/run
  python pondsim.py sweep --trace data/trace.csv --sizes 8,16,32,64 --policy static:0.5 --out data/sweep
  python pondsim.py report --in data/sweep --out data/report
  python pondsim.py defaults

Failures print one line on stderr:
  error=<ErrorClass> code=<exit code> message="<text>"
"""

import os
import sys
import glob
import json
import argparse
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import pandas as pd
import yaml

import config
import simulator
import vm_trace
from errors import ConfigError, MissingFileError, PondError, SchemaError, error_line
from logs import get_logger, setup_logging
from pool_hw import PoolTopology, latency_scenario, pool_latency_ns
from predictors import (FOREST, MODEL_KINDS, calibrate_models, fp_grid, load_snapshot,
                        save_snapshot, split_validation, static_untouched_curve)
from control_plane import EventLog

logger = get_logger()


# ---------------------------------------------------------
# CONFIG FILES
# ---------------------------------------------------------
def load_yaml(path):
    if not path or not os.path.exists(path):
        raise MissingFileError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise SchemaError(f"invalid YAML in {path}", line=mark.line + 1 if mark else None)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise SchemaError(f"{path} must hold a mapping at top level", line=1)
    return doc


@dataclass
class RunConfig:
    trace: Optional[str] = None
    cluster: Optional[object] = None          # path to a cluster file or an inline mapping
    policy: str = simulator.cp.ALL_LOCAL
    models: Optional[str] = None
    scenario: Optional[str] = None
    seed: int = config.RNG_SEED
    out: str = os.path.join(config.DATA_DIR, "run")
    event_log: bool = False
    assert_capacity: bool = False
    cold_start: bool = False

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        return cls(**d)

    def cluster_config(self):
        if self.cluster is None:
            cluster = simulator.ClusterConfig()
        elif isinstance(self.cluster, dict):
            cluster = simulator.ClusterConfig.from_dict(self.cluster)
        else:
            cluster = simulator.ClusterConfig.from_dict(load_yaml(self.cluster))
        if self.scenario:
            cluster = simulator.ClusterConfig(**{**asdict(cluster), "scenario": str(self.scenario)})
        return cluster.validate()


def run_config_from_args(args):
    cfg = RunConfig.from_dict(load_yaml(args.config)) if getattr(args, "config", None) else RunConfig()
    for name in ("trace", "cluster", "models", "scenario", "seed", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "policy", None):
        cfg.policy = args.policy[0] if isinstance(args.policy, list) else args.policy
    for flag in ("event_log", "assert_capacity", "cold_start"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    if not cfg.trace:
        raise ConfigError("no trace given (--trace or 'trace:' in the run config)")
    return cfg


def _models(path):
    return load_snapshot(path) if path else None


def _atomic_csv(df, path):
    tmp = f"{path}.tmp"
    df.to_csv(tmp, index=False, lineterminator="\n")
    os.replace(tmp, path)


# ---------------------------------------------------------
# COMMANDS
# ---------------------------------------------------------
def cmd_gen_trace(args):
    doc = load_yaml(args.config) if args.config else {}
    cfg = vm_trace.TraceGenConfig.from_dict(doc)
    if args.seed is not None:
        cfg.rng_seed = args.seed
    trace = vm_trace.generate_trace(cfg)
    vm_trace.write_trace(trace, args.out)
    summary = vm_trace.trace_summary(trace)
    logger.info(f"Trace summary: {json.dumps(summary, sort_keys=True)}")


def cmd_calibrate(args):
    if args.model not in MODEL_KINDS:
        raise ConfigError(f"unknown model '{args.model}'; expected one of {MODEL_KINDS}")
    trace = vm_trace.read_trace(args.trace)
    scenarios = [s.strip() for s in args.scenarios.split(",")] if args.scenarios else sorted(config.LATENCY_SCENARIOS)
    for s in scenarios:
        latency_scenario(s)
    snap = calibrate_models(trace, args.pdm / 100.0, scenarios=scenarios, model_kind=args.model, seed=args.seed)

    table = pd.DataFrame({"rate_pct": fp_grid()})
    for s, curves in sorted(snap.curves.items()):
        table[f"li_{s}"] = curves.li
        table[f"um_{s}"] = curves.um
        table[f"op_target_{s}"] = curves.op_target
    _, _, test = split_validation(trace)
    table["um_static"] = static_untouched_curve(test)
    table = table.round(6)

    save_snapshot(snap, args.out)
    curves_path = os.path.splitext(args.out)[0] + "_curves.csv"
    _atomic_csv(table, curves_path)
    logger.info(f"Wrote tradeoff curves to {curves_path}")


def _run_info(cfg, cluster):
    return {"trace": cfg.trace, "models": cfg.models, "seed": cfg.seed, "cluster": asdict(cluster)}


def cmd_run(args):
    cfg = run_config_from_args(args)
    cluster = cfg.cluster_config()
    policy = simulator.Policy.parse(cfg.policy)
    trace = vm_trace.read_trace(cfg.trace)
    models = _models(cfg.models)
    log = None
    if cfg.event_log:
        os.makedirs(cfg.out, exist_ok=True)
        log = EventLog(os.path.join(cfg.out, "events.jsonl.tmp"))
    try:
        m = simulator.run(trace, cluster, policy, seed=cfg.seed, models=models, event_log=log,
                          assert_capacity=cfg.assert_capacity, warm_start=not cfg.cold_start)
    except Exception:
        if log:
            log.close()
            os.remove(log.path)
        raise
    if log:
        log.close()
        os.replace(log.path, os.path.join(cfg.out, "events.jsonl"))
    info = {**_run_info(cfg, cluster), "policy": policy.label}
    simulator.write_metrics([m], os.path.join(cfg.out, "metrics.json"), info)
    _atomic_csv(simulator.metrics_table([m]), os.path.join(cfg.out, "metrics.csv"))


def parse_sizes(text):
    try:
        return sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError:
        raise ConfigError(f"bad --sizes '{text}'; expected e.g. 8,16,32,64")


def cmd_sweep(args):
    cfg = run_config_from_args(args)
    cluster = cfg.cluster_config()
    policies = [simulator.Policy.parse(p) for p in (args.policy or [cfg.policy])]
    trace = vm_trace.read_trace(cfg.trace)
    models = _models(cfg.models)
    rows = []
    if args.sizes:
        sizes = parse_sizes(args.sizes)
        for p in policies:
            rows.extend(simulator.sweep_pool_sizes(trace, cluster, p, sizes=sizes, seed=cfg.seed,
                                                   models=models, jobs=args.jobs))
    else:
        rows = simulator.compare_policies(trace, cluster, policies, seed=cfg.seed, models=models, jobs=args.jobs)
    os.makedirs(cfg.out, exist_ok=True)
    info = {**_run_info(cfg, cluster), "policies": [p.label for p in policies], "sizes": args.sizes}
    simulator.write_metrics(rows, os.path.join(cfg.out, "sweep.json"), info)
    _atomic_csv(simulator.metrics_table(rows), os.path.join(cfg.out, "sweep.csv"))


def cmd_report(args):
    if not os.path.isdir(args.inp):
        raise MissingFileError(f"input directory not found: {args.inp}")
    paths = sorted(glob.glob(os.path.join(args.inp, "*.json")))
    rows = []
    for path in paths:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path} is not valid JSON", line=e.lineno)
        if not isinstance(doc, dict) or "rows" not in doc:
            logger.info(f"Skipping {path}: not a metrics document")
            continue
        rows.extend(doc["rows"])
    if not rows:
        raise MissingFileError(f"no metrics documents in {args.inp}")

    os.makedirs(args.out, exist_ok=True)
    summary = simulator.metrics_table(rows)
    _atomic_csv(summary, os.path.join(args.out, "summary.csv"))
    _atomic_csv(simulator.stranding_table(rows), os.path.join(args.out, "stranding.csv"))
    savings = (summary.pivot_table(index="pool_sockets", columns="policy", values="dram_savings_pct", aggfunc="first")
               .sort_index().reset_index())
    savings.columns.name = None
    _atomic_csv(savings, os.path.join(args.out, "savings_by_pool_size.csv"))
    logger.info(f"Report: {len(rows)} rows from {len(paths)} files -> {args.out}")


def defaults_reference():
    return {
        "trace": vm_trace.trace_config_dict(vm_trace.TraceGenConfig()),
        "cluster": asdict(simulator.ClusterConfig()),
        "run": asdict(RunConfig()),
        "policies": {
            "all_local": "everything in server-local DRAM (baseline)",
            "static": f"static:<fraction>, default {config.STATIC_POOL_FRACTION}",
            "pond": f"pond:pdm=<pct>,tp=<pct>[,mitigation=off][,model={'|'.join(MODEL_KINDS)}][,scenario=<name>]"
                    f", default pdm={config.DEFAULT_PDM * 100:g} tp={config.DEFAULT_TP:g}",
        },
        "latency_scenarios": {k: {"local_ns": v[0], "pool_ns": v[1]} for k, v in config.LATENCY_SCENARIOS.items()},
        "pool_added_ns": {s: pool_latency_ns(PoolTopology(s), None) for s in config.POOL_SIZES},
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_defaults(args):
    print(yaml.safe_dump(_plain(defaults_reference()), sort_keys=True, default_flow_style=False), end="")


# ---------------------------------------------------------
# ENTRY POINT
# ---------------------------------------------------------
def _add_run_args(p):
    p.add_argument("--config", help="Run config YAML (flags below override it)")
    p.add_argument("--trace", help="Trace CSV")
    p.add_argument("--cluster", help="Cluster config YAML")
    p.add_argument("--models", help="Model snapshot JSON (POND calibrates in-sample without it)")
    p.add_argument("--scenario", help=f"Latency scenario, one of {sorted(config.LATENCY_SCENARIOS)}")
    p.add_argument("--seed", type=int, help=f"Seed (default {config.RNG_SEED})")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--event-log", action="store_true", help="Write events.jsonl next to the metrics")
    p.add_argument("--assert-capacity", action="store_true", help="Check capacity conservation after every event")
    p.add_argument("--cold-start", action="store_true", help="Ignore the snapshot's customer history")


def build_parser():
    parser = argparse.ArgumentParser(description="Trace-driven CXL memory pool simulator")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help=f"Logging level (default {config.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="Generate a calibrated synthetic VM trace")
    p.add_argument("--config", help="Trace config YAML (defaults: see 'defaults')")
    p.add_argument("--out", required=True, help="Trace CSV to write")
    p.add_argument("--seed", type=int, help="Overrides rng_seed from the config")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("calibrate", help="Calibrate prediction models and tradeoff curves on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--pdm", type=float, default=config.DEFAULT_PDM * 100,
                   help=f"Performance degradation margin in %% (default {config.DEFAULT_PDM * 100:g})")
    p.add_argument("--model", default=FOREST, help=f"Sensitivity model, one of {MODEL_KINDS}")
    p.add_argument("--scenarios", help="Comma-separated latency scenarios (default: all)")
    p.add_argument("--seed", type=int, default=config.RNG_SEED)
    p.add_argument("--out", required=True, help="Model snapshot JSON to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="Simulate one policy on a trace")
    _add_run_args(p)
    p.add_argument("--policy", help="all_local | static:<fraction> | pond:pdm=<pct>,tp=<pct>")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Sweep pool sizes and/or compare policies")
    _add_run_args(p)
    p.add_argument("--policy", action="append", help="Policy to include; repeat for several")
    p.add_argument("--sizes", help="Comma-separated pool sizes, e.g. 8,16,32,64")
    p.add_argument("--jobs", type=int, default=1, help="Parallel simulation processes (default 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="Turn metrics documents into plot-ready tables")
    p.add_argument("--in", dest="inp", required=True, help="Directory with metrics JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("defaults", help="Print every default as YAML")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    log = setup_logging(args.log_level)
    try:
        args.func(args)
    except PondError as e:
        log.error(f"{args.command} failed: {e}")
        print(error_line(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        log.exception(f"{args.command} crashed")
        print(error_line(e), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
