"""
simulator.py
============
Discrete-event engine: replays a VM trace against a cluster of servers with
pooled memory, runs a memory policy through the control plane and reports
DRAM savings, stranding, mispredictions and offlining demand.

Event order at equal timestamps: drain-complete < exit < arrival < qos-tick,
then insertion sequence.

DRAM savings
------------
  baseline = sum of per-server peak local DRAM under ALL_LOCAL
  share    = pool GB-seconds / VM GB-seconds held under the policy
  local    = baseline * (1 - share)
  pool     = sum of per-pool peak slices (assigned + draining)
  savings  = (baseline - local - pool) / baseline * 100

  Local DRAM shrinks by the share of VM memory served from the pool.
  Per-server imbalance in that share is left to the move fallback and is not
  charged; local_peak_sum_gb reports the sum of per-server local peaks under
  the policy for comparison.
"""

import os
import copy
import json
import heapq
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, asdict, replace
from datetime import datetime
from typing import Optional

import numpy as np
import pandas as pd
import pytz

import config
import control_plane as cp
from errors import ConfigError, ValidationError
from logs import get_logger
from pool_hw import latency_scenario, telemetry_overhead_s
from predictors import FOREST, MODEL_KINDS, CombinedConfig, calibrate_models, solve_combined

logger = get_logger("simulator")

DAY_S = 86400


# ---------------------------------------------------------
# CONFIG TYPES
# ---------------------------------------------------------
@dataclass(frozen=True)
class Policy:
    variant: str = cp.ALL_LOCAL
    fraction: float = 0.0
    combined: Optional[CombinedConfig] = None
    mitigation: bool = True
    model_kind: str = FOREST
    scenario: Optional[str] = None      # overrides the cluster's latency scenario

    def __post_init__(self):
        if self.variant not in (cp.ALL_LOCAL, cp.STATIC, cp.POND):
            raise ConfigError(f"unknown policy '{self.variant}'")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"static pool fraction must be in [0, 1], got {self.fraction}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model '{self.model_kind}'")
        if self.scenario is not None:
            latency_scenario(self.scenario)
        if self.variant == cp.POND and self.combined is None:
            object.__setattr__(self, "combined", CombinedConfig())

    @property
    def pdm(self):
        return self.combined.pdm if self.combined else config.DEFAULT_PDM

    @property
    def label(self):
        if self.variant == cp.STATIC:
            return f"static:{self.fraction:g}"
        if self.variant == cp.POND:
            parts = [f"pdm={self.combined.pdm * 100:g}", f"tp={self.combined.tp:g}"]
            if not self.mitigation:
                parts.append("mitigation=off")
            if self.model_kind != FOREST:
                parts.append(f"model={self.model_kind}")
            if self.scenario:
                parts.append(f"scenario={self.scenario}")
            return "pond:" + ",".join(parts)
        return cp.ALL_LOCAL

    @classmethod
    def parse(cls, text):
        """'all_local' | 'static:0.15' | 'pond:pdm=5,tp=98[,mitigation=off,model=threshold,scenario=222]'."""
        name, _, args = str(text).strip().partition(":")
        name = name.lower()
        if name == cp.ALL_LOCAL:
            if args:
                raise ConfigError("all_local takes no arguments")
            return cls(cp.ALL_LOCAL)
        if name == cp.STATIC:
            try:
                frac = float(args) if args else config.STATIC_POOL_FRACTION
            except ValueError:
                raise ConfigError(f"bad static fraction '{args}'")
            return cls(cp.STATIC, fraction=frac)
        if name == cp.POND:
            opts = {}
            for item in filter(None, args.split(",")):
                k, eq, v = item.partition("=")
                if not eq:
                    raise ConfigError(f"bad policy option '{item}'")
                opts[k.strip().lower()] = v.strip()
            unknown = sorted(set(opts) - {"pdm", "tp", "mitigation", "model", "scenario"})
            if unknown:
                raise ConfigError(f"unknown pond options {unknown}")
            try:
                pdm = float(opts.get("pdm", config.DEFAULT_PDM * 100)) / 100.0
                tp = float(opts.get("tp", config.DEFAULT_TP))
            except ValueError:
                raise ConfigError(f"bad pond option value in '{text}'")
            mitigation = opts.get("mitigation", "on").lower()
            if mitigation not in ("on", "off"):
                raise ConfigError("mitigation must be on or off")
            return cls(cp.POND, combined=CombinedConfig(pdm=pdm, tp=tp), mitigation=mitigation == "on",
                       model_kind=opts.get("model", FOREST), scenario=opts.get("scenario"))
        raise ConfigError(f"unknown policy '{name}'; expected all_local, static or pond")


@dataclass(frozen=True)
class ClusterConfig:
    n_servers: int = config.N_CLUSTERS * config.SERVERS_PER_CLUSTER
    servers_per_cluster: int = config.SERVERS_PER_CLUSTER
    cores_per_server: int = config.CORES_PER_SERVER
    local_dram_gb: int = config.DRAM_GB_PER_SERVER
    pool_sockets: int = 16
    pool_gb_per_socket: int = config.POOL_GB_PER_SOCKET
    scenario: str = config.DEFAULT_SCENARIO

    def validate(self):
        latency_scenario(self.scenario)
        if self.n_servers < 1 or self.servers_per_cluster < 1:
            raise ConfigError("need at least one server")
        if self.n_servers % self.servers_per_cluster:
            raise ConfigError(f"servers_per_cluster={self.servers_per_cluster} must divide n_servers={self.n_servers}")
        if self.pool_sockets not in config.POOL_SIZES:
            raise ConfigError(f"unsupported pool size {self.pool_sockets}; expected one of {config.POOL_SIZES}")
        if self.servers_per_cluster % self.pool_sockets:
            raise ConfigError(f"pool size {self.pool_sockets} must divide servers_per_cluster={self.servers_per_cluster}")
        if self.cores_per_server < 1 or self.local_dram_gb < 1 or self.pool_gb_per_socket < 0:
            raise ConfigError("server cores/DRAM must be positive")
        return self

    def with_pool_size(self, size):
        return replace(self, pool_sockets=size)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown cluster config keys: {unknown}")
        if "scenario" in d:
            d["scenario"] = str(d["scenario"])
        return cls(**d).validate()


@dataclass
class SimMetrics:
    policy: str = cp.ALL_LOCAL
    scenario: str = config.DEFAULT_SCENARIO
    pool_sockets: int = 0
    n_vms: int = 0
    scheduled: int = 0
    scheduling_failures: int = 0
    moved_vms: int = 0
    span_s: float = 0.0
    baseline_dram_gb: float = 0.0
    local_dram_gb: float = 0.0
    local_peak_sum_gb: float = 0.0
    pool_dram_gb: float = 0.0
    dram_savings_pct: float = 0.0
    pool_dram_share_pct: float = 0.0
    pool_access_pct: float = 0.0
    insensitive_pct: float = 0.0
    scheduling_misprediction_pct: float = 0.0
    migrations: int = 0
    deferred_mitigations: int = 0
    deferral_events: int = 0
    buffer_low_water_events: int = 0
    offline_rate_gbps: dict = field(default_factory=dict)
    offline_above_1gbps_pct: float = 0.0
    offline_above_10gbps_pct: float = 0.0
    stranded_dram_pct: list = field(default_factory=list)
    telemetry_overhead_s: dict = field(default_factory=dict)
    fp_star: Optional[float] = None
    op_star: Optional[float] = None

    def to_dict(self):
        return _rounded(asdict(self))


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    if isinstance(obj, np.generic):
        return _rounded(obj.item())
    return obj


# ---------------------------------------------------------
# STRANDING
# ---------------------------------------------------------
def measure_stranding(free_cores, free_mem, cluster):
    """Per-cluster (core-utilization %, stranded GB, stranded %) at one instant."""
    per = cluster.servers_per_cluster
    out = []
    for lo in range(0, cluster.n_servers, per):
        fc = np.asarray(free_cores[lo:lo + per])
        fm = np.asarray(free_mem[lo:lo + per])
        util = 100.0 * (1.0 - fc.sum() / (per * cluster.cores_per_server))
        stranded = float(fm[fc == 0].sum())
        out.append((util, stranded, 100.0 * stranded / (per * cluster.local_dram_gb)))
    return out


def stranding_series(samples):
    """Mean stranded % per core-utilization bucket."""
    if not samples:
        return []
    df = pd.DataFrame(samples, columns=["util", "stranded_gb", "stranded_pct"])
    step = config.STRANDING_BUCKET_PCT
    df["bucket_pct"] = (np.floor(df["util"] / step) * step).clip(0, 100).astype(int)
    g = df.groupby("bucket_pct")["stranded_pct"].agg(["mean", "count"]).reset_index()
    return [{"bucket_pct": int(r.bucket_pct), "stranded_pct": float(r["mean"]), "samples": int(r["count"])}
            for _, r in g.iterrows()]


# ---------------------------------------------------------
# RUN
# ---------------------------------------------------------
def _check_trace(trace, cluster):
    last = None
    for vm in trace:
        if last is not None and vm.arrival < last:
            raise ValidationError(f"trace not sorted by arrival at VM {vm.vm_id}")
        last = vm.arrival
        if vm.cores > cluster.cores_per_server or vm.memory_gb > cluster.local_dram_gb:
            raise ValidationError(f"VM {vm.vm_id} ({vm.cores} cores, {vm.memory_gb} GB) does not fit on any server")


def _offline_stats(demand):
    if not demand:
        return {}, 0.0, 0.0
    d = np.asarray(demand, dtype=float)
    pct = {f"p{p:g}": float(np.percentile(d, p)) for p in (50, 99, 99.9, 99.99)}
    pct["max"] = float(d.max())
    lo, hi = config.OFFLINE_RATE_THRESHOLDS_GBPS
    return pct, 100.0 * float((d > lo).mean()), 100.0 * float((d > hi).mean())


def _pond_models(trace, policy, scenario, models, seed, warm_start):
    snapshot = models
    if snapshot is None:
        logger.info(f"No model snapshot given; calibrating on the trace itself ({len(trace)} VMs)")
        snapshot = calibrate_models(trace, policy.pdm, scenarios=[scenario],
                                    model_kind=policy.model_kind, seed=seed)
    snapshot = copy.deepcopy(snapshot)
    if models is None or not warm_start:
        snapshot.history = type(snapshot.history)()
    solution = solve_combined(snapshot.curves_for(scenario), policy.combined)
    target_op = snapshot.curves_for(scenario).op_target_at(solution.op_star)
    logger.info(f"Combined model [{scenario}]: FP*={solution.fp_star:.1f}% OP*={solution.op_star:.1f}% "
                f"(quantile target {target_op:g}%) objective={solution.objective:.1f}")
    return cp.SchedulingModels(snapshot, solution.fp_star, target_op), solution


def run(trace, cluster, policy, seed=config.RNG_SEED, models=None, event_log=None,
        assert_capacity=False, baseline_gb=None, warm_start=True):
    cluster.validate()
    scenario = policy.scenario or cluster.scenario
    _check_trace(trace, cluster)
    metrics = SimMetrics(policy=policy.label, scenario=scenario, pool_sockets=cluster.pool_sockets,
                         n_vms=len(trace))
    if not trace:
        return metrics

    ctl = cp.ControlConfig(mode=policy.variant, static_fraction=policy.fraction, pdm=policy.pdm,
                           scenario=scenario, mitigation=policy.mitigation and policy.variant == cp.POND)
    state = cp.ClusterState(cluster, ctl, event_log=event_log)
    sched_models, solution = None, None
    if policy.variant == cp.POND:
        sched_models, solution = _pond_models(trace, policy, scenario, models, seed, warm_start)
        metrics.fp_star, metrics.op_star = solution.fp_star, solution.op_star
    history = sched_models.snapshot.history if sched_models else None

    rng_drain, rng_qos = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    heap = []
    seq = itertools.count()

    def push(t, kind, payload):
        heapq.heappush(heap, (t, cp.PRIORITY[kind], next(seq), kind, payload))

    for vm in trace:
        push(vm.arrival, cp.ARRIVAL, vm)

    next_day = DAY_S
    next_sample = 0
    tick_pending = False
    strand = []
    insensitive = 0
    now = 0.0

    while heap:
        now, _, _, kind, payload = heapq.heappop(heap)

        while now >= next_sample:
            strand.extend(measure_stranding(state.free_cores, state.free_mem, cluster))
            next_sample += config.STRANDING_SAMPLE_S
        while history is not None and now >= next_day:
            history.refresh(now=next_day)
            next_day += DAY_S

        if kind == cp.ARRIVAL:
            placed = cp.schedule_vm(payload, state, sched_models, ctl, now)
            if placed is not None:
                insensitive += int(placed.insensitive)
                push(payload.departure, cp.EXIT, payload.vm_id)
                if not state.active[payload.vm_id].qos.settled and not tick_pending:
                    push(now + config.QOS_TICK_S, cp.QOS, None)
                    tick_pending = True
        elif kind == cp.EXIT:
            vm = state.active[payload].vm
            for ev in cp.on_vm_exit(payload, state, now, rng_drain):
                push(*ev)
            if history is not None:
                history.add(vm.customer_id, vm.ground_truth.untouched_fraction, now)
        elif kind == cp.DRAIN:
            cp.on_drain_complete(state, *payload, now)
        elif kind == cp.MIGRATION:
            if payload in state.active:
                for ev in cp.on_migration_complete(state, payload, now, rng_drain):
                    push(*ev)
        elif kind == cp.QOS:
            tick_pending = False
            for m in cp.qos_tick(state, now, rng_qos):
                push(m.done, cp.MIGRATION, m.vm_id)
            if cp.monitored(state):
                push(now + config.QOS_TICK_S, cp.QOS, None)
                tick_pending = True

        if assert_capacity:
            state.check_conservation()

    metrics.scheduled = len(trace) - state.failures
    metrics.scheduling_failures = state.failures
    metrics.moved_vms = state.moved
    metrics.span_s = float(now)
    metrics.local_peak_sum_gb = float(state.peak_local.sum())
    metrics.pool_dram_gb = float(sum(g.peak_used for g in state.groups) * config.SLICE_GB)
    if policy.variant == cp.ALL_LOCAL:
        baseline_gb = metrics.local_peak_sum_gb
    elif baseline_gb is None:
        baseline_gb = run(trace, cluster, Policy(cp.ALL_LOCAL), seed=seed).local_dram_gb
    share = state.pool_gb_s / state.memory_gb_s if state.memory_gb_s > 0 else 0.0
    metrics.baseline_dram_gb = float(baseline_gb)
    metrics.local_dram_gb = float(baseline_gb) * (1.0 - share)
    metrics.pool_dram_share_pct = 100.0 * share
    if baseline_gb > 0:
        metrics.dram_savings_pct = 100.0 * (baseline_gb - metrics.local_dram_gb - metrics.pool_dram_gb) / baseline_gb
    if state.pool_access:
        metrics.pool_access_pct = 100.0 * float(np.mean(state.pool_access))
    if metrics.scheduled:
        metrics.insensitive_pct = 100.0 * insensitive / metrics.scheduled
    if state.finished:
        metrics.scheduling_misprediction_pct = 100.0 * state.mispredicted / state.finished
    metrics.migrations = state.migrations
    metrics.deferred_mitigations = len(state.deferred_vms)
    metrics.deferral_events = state.deferral_events
    metrics.buffer_low_water_events = sum(g.low_water_events for g in state.groups)
    (metrics.offline_rate_gbps, metrics.offline_above_1gbps_pct,
     metrics.offline_above_10gbps_pct) = _offline_stats(state.offline_demand)
    metrics.stranded_dram_pct = stranding_series(strand)
    metrics.telemetry_overhead_s = telemetry_overhead_s(metrics.span_s, cluster.n_servers)
    logger.info(f"[{metrics.policy} | {scenario} | {cluster.pool_sockets} sockets] "
                f"savings={metrics.dram_savings_pct:.2f}% pool share={metrics.pool_dram_share_pct:.1f}% "
                f"mispredictions={metrics.scheduling_misprediction_pct:.2f}% migrations={metrics.migrations}")
    return metrics


# ---------------------------------------------------------
# SWEEPS / COMPARISONS
# ---------------------------------------------------------
def _run_job(job):
    trace, cluster, policy, seed, models, baseline_gb = job
    return run(trace, cluster, policy, seed=seed, models=models, baseline_gb=baseline_gb)


def _map(jobs, n_jobs):
    if n_jobs and n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def sweep_pool_sizes(trace, cluster, policy, sizes=config.POOL_SIZES, seed=config.RNG_SEED,
                     models=None, jobs=1):
    sizes = sorted(set(int(s) for s in sizes))
    for s in sizes:
        if s not in config.POOL_SIZES:
            raise ConfigError(f"unsupported pool size {s}; expected one of {config.POOL_SIZES}")
        if cluster.n_servers % s or cluster.servers_per_cluster % s:
            raise ConfigError(f"pool size {s} does not divide {cluster.servers_per_cluster} servers per cluster")
    if not sizes:
        raise ConfigError("no pool sizes to sweep")
    cluster.with_pool_size(sizes[0]).validate()
    _check_trace(trace, cluster)
    baseline = run(trace, cluster.with_pool_size(sizes[0]), Policy(cp.ALL_LOCAL), seed=seed).local_dram_gb if trace else 0.0
    rows = _map([(trace, cluster.with_pool_size(s), policy, seed, models, baseline) for s in sizes], jobs)
    if not savings_monotone(rows):
        logger.warning("Savings are not monotone in pool size for this sweep")
    return rows


def savings_monotone(rows, tol=1e-9):
    s = [r.dram_savings_pct for r in sorted(rows, key=lambda r: r.pool_sockets)]
    return all(b >= a - tol for a, b in zip(s, s[1:]))


def compare_policies(trace, cluster, policies, seed=config.RNG_SEED, models=None, jobs=1):
    cluster.validate()
    _check_trace(trace, cluster)
    baseline = run(trace, cluster, Policy(cp.ALL_LOCAL), seed=seed).local_dram_gb if trace else 0.0
    return _map([(trace, cluster, p, seed, models, baseline) for p in policies], jobs)


# ---------------------------------------------------------
# OUTPUT
# ---------------------------------------------------------
def now_utc():
    return datetime.now(pytz.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def metrics_document(rows, run_info=None):
    return {
        "meta": {"generated_at_utc": now_utc()},
        "run": _rounded(run_info or {}),
        "rows": [r.to_dict() for r in rows],
    }


def write_metrics(rows, path, run_info=None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(metrics_document(rows, run_info), f, indent=2, sort_keys=True)
    os.replace(tmp, path)
    logger.info(f"Wrote {len(rows)} metrics rows to {path}")


def read_metrics_rows(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return doc.get("rows", [])


def metrics_table(rows):
    """Flat table for plotting: one line per run, scalar columns only."""
    recs = []
    for r in rows:
        d = r.to_dict() if isinstance(r, SimMetrics) else dict(r)
        flat = {k: v for k, v in d.items() if not isinstance(v, (dict, list))}
        for k, v in (d.get("offline_rate_gbps") or {}).items():
            flat[f"offline_{k}_gbps"] = v
        recs.append(flat)
    df = pd.DataFrame(recs)
    if not df.empty:
        df = df.sort_values(["pool_sockets", "policy", "scenario"], kind="stable").reset_index(drop=True)
    return df


def stranding_table(rows):
    recs = []
    for r in rows:
        d = r.to_dict() if isinstance(r, SimMetrics) else dict(r)
        for s in d.get("stranded_dram_pct", []):
            recs.append({"policy": d["policy"], "scenario": d["scenario"], "pool_sockets": d["pool_sockets"], **s})
    return pd.DataFrame(recs, columns=["policy", "scenario", "pool_sockets", "bucket_pct", "stranded_pct", "samples"])
