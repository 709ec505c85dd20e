"""
vm_trace.py
===========
VM trace data model, trace file I/O and the calibrated synthetic trace generator.

Trace file
----------
  UTF-8 CSV, one VM per line, header row naming every column.
  Times are integer seconds since trace start, fractions use 6 decimals.
  Ground truth (untouched fraction, slowdown curve) lives in the same record;
  the simulator hides it from the policies and only hands telemetry views to
  the predictors.

Slowdown model
--------------
  slowdown(spill) = slowdown_full_pool[scenario] * spill ** curve_exponent
"""

import os
import re
import math
import heapq
from dataclasses import dataclass, field, fields, asdict
from typing import Mapping, Optional

import numpy as np
import pandas as pd

import config
from errors import ConfigError, MissingFileError, SchemaError, ValidationError
from logs import get_logger

logger = get_logger("trace")

FRACTION_FMT = "{:.6f}"


# ---------------------------------------------------------
# DOMAIN TYPES
# ---------------------------------------------------------
@dataclass(frozen=True)
class WorkloadGroundTruth:
    untouched_fraction: float
    slowdown_full_pool: Mapping[str, float]
    curve_exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.untouched_fraction <= 1.0:
            raise ValidationError(f"untouched_fraction {self.untouched_fraction} outside [0,1]")
        if self.curve_exponent <= 0:
            raise ValidationError(f"curve_exponent must be positive, got {self.curve_exponent}")
        for name, s in self.slowdown_full_pool.items():
            if s < 0:
                raise ValidationError(f"negative slowdown {s} for scenario {name}")


@dataclass(frozen=True)
class VmRequest:
    vm_id: int
    customer_id: str
    vm_type: str
    arrival: int
    lifetime: int
    cores: int
    memory_gb: int
    server_hint: Optional[int]
    ground_truth: WorkloadGroundTruth
    # PMU-derived telemetry seen by the sensitivity model
    dram_bound: float = 0.0
    memory_bound: float = 0.0

    def __post_init__(self):
        if self.lifetime <= 0:
            raise ValidationError(f"VM {self.vm_id}: lifetime must be > 0")
        if self.cores < 1:
            raise ValidationError(f"VM {self.vm_id}: cores must be >= 1")
        if self.memory_gb < 1:
            raise ValidationError(f"VM {self.vm_id}: memory_gb must be >= 1")

    @property
    def departure(self):
        return self.arrival + self.lifetime

    @property
    def touched_gb(self):
        return self.memory_gb * (1.0 - self.ground_truth.untouched_fraction)


@dataclass
class TraceGenConfig:
    n_vms: int = config.N_VMS
    n_clusters: int = config.N_CLUSTERS
    servers_per_cluster: int = config.SERVERS_PER_CLUSTER
    cores_per_server: int = config.CORES_PER_SERVER
    dram_gb_per_server: int = config.DRAM_GB_PER_SERVER
    target_core_utilization: float = config.TARGET_CORE_UTILIZATION
    lifetime_median_s: float = config.LIFETIME_MEDIAN_S
    lifetime_sigma: float = config.LIFETIME_SIGMA
    vms_per_customer: int = config.VMS_PER_CUSTOMER
    customer_zipf_exponent: float = config.CUSTOMER_ZIPF_EXPONENT
    untouched_median: float = config.UNTOUCHED_MEDIAN
    untouched_concentration: float = config.UNTOUCHED_BETA_CONCENTRATION
    untouched_vm_noise: float = config.UNTOUCHED_VM_NOISE
    slowdown_mixture: dict = field(default_factory=lambda: {k: tuple(v) for k, v in config.SLOWDOWN_MIXTURE.items()})
    vm_types: dict = field(default_factory=lambda: dict(config.VM_TYPES))
    placement_pack_share: float = config.PLACEMENT_PACK_SHARE
    rng_seed: int = config.RNG_SEED
    population_seed: int = config.POPULATION_SEED

    def validate(self):
        if self.n_vms < 0:
            raise ConfigError("n_vms must be >= 0")
        if self.n_clusters < 1 or self.servers_per_cluster < 1:
            raise ConfigError("need at least one cluster with one server")
        if self.cores_per_server < 1 or self.dram_gb_per_server < 1:
            raise ConfigError("servers need cores and DRAM")
        if not 0 < self.target_core_utilization <= 1.5:
            raise ConfigError("target_core_utilization must be in (0, 1.5]")
        if not 0 < self.untouched_median < 1:
            raise ConfigError("untouched_median must be in (0,1)")
        if self.untouched_concentration <= 2:
            raise ConfigError("untouched_concentration must exceed 2")
        if self.untouched_vm_noise < 0:
            raise ConfigError("untouched_vm_noise must be nonnegative")
        if not 0 <= self.placement_pack_share <= 1:
            raise ConfigError("placement_pack_share must be in [0,1]")
        n_classes = len(config.SLOWDOWN_CLASS_EDGES) - 1
        for name, weights in self.slowdown_mixture.items():
            if name not in config.LATENCY_SCENARIOS:
                raise ConfigError(f"unknown latency scenario '{name}' in slowdown_mixture")
            w = np.asarray(weights, dtype=float)
            if len(w) != n_classes or (w < 0).any() or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ConfigError(f"mixture weights for '{name}' must be {n_classes} nonnegative values summing to 1")
        if not self.vm_types:
            raise ConfigError("vm_types is empty")
        for name, (cores, mem, weight) in self.vm_types.items():
            if cores < 1 or mem < 1 or weight < 0:
                raise ConfigError(f"bad vm type {name}")
            if cores > self.cores_per_server or mem > self.dram_gb_per_server:
                raise ConfigError(f"vm type {name} does not fit on a server")
        if sum(w for _, _, w in self.vm_types.values()) <= 0:
            raise ConfigError("vm type weights sum to zero")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown trace config keys: {unknown}")
        if "slowdown_mixture" in d:
            d["slowdown_mixture"] = {str(k): tuple(v) for k, v in d["slowdown_mixture"].items()}
        if "vm_types" in d:
            d["vm_types"] = {str(k): tuple(v) for k, v in d["vm_types"].items()}
        return cls(**d)


# ---------------------------------------------------------
# SLOWDOWN MODEL
# ---------------------------------------------------------
def slowdown_at(gt, spill, scenario):
    if scenario not in gt.slowdown_full_pool:
        raise ConfigError(f"unknown latency scenario '{scenario}'")
    if not 0.0 <= spill <= 1.0:
        raise ValidationError(f"spill {spill} outside [0,1]")
    if spill == 0.0:
        return 0.0
    return gt.slowdown_full_pool[scenario] * spill ** gt.curve_exponent


# ---------------------------------------------------------
# GENERATOR
# ---------------------------------------------------------
def _mixture_quantile(u, weights, edges=config.SLOWDOWN_CLASS_EDGES):
    """Inverse CDF of a piecewise-uniform class mixture."""
    w = np.asarray(weights, dtype=float)
    edges = np.asarray(edges, dtype=float)
    cum = np.cumsum(w)
    k = np.minimum(np.searchsorted(cum, u, side="right"), len(w) - 1)
    lo = cum[k] - w[k]
    width = np.where(w[k] > 0, w[k], 1.0)
    frac = np.clip((u - lo) / width, 0.0, 1.0)
    return edges[k] + frac * (edges[k + 1] - edges[k])


def _beta_params(median, concentration):
    # median ~ (a - 1/3) / (a + b - 2/3) for a, b > 1
    a = median * (concentration - 2.0 / 3.0) + 1.0 / 3.0
    return a, concentration - a


def _place(arrivals, departures, cores, mem, cluster_of, cfg, rng):
    """All-local placement per cluster, standing in for the production scheduler.

    A `placement_pack_share` of arrivals goes to the first server that fits; the rest land on a
    random fitting server. A share of 1 is pure first fit.
    """
    n_servers = cfg.n_clusters * cfg.servers_per_cluster
    free_cores = np.full(n_servers, cfg.cores_per_server, dtype=np.int64)
    free_mem = np.full(n_servers, cfg.dram_gb_per_server, dtype=np.int64)
    hints = [None] * len(arrivals)
    running = []
    unplaced = 0
    pack = rng.random(len(arrivals)) < cfg.placement_pack_share
    for i in range(len(arrivals)):
        t = arrivals[i]
        while running and running[0][0] <= t:
            _, s, c, m = heapq.heappop(running)
            free_cores[s] += c
            free_mem[s] += m
        lo = cluster_of[i] * cfg.servers_per_cluster
        hi = lo + cfg.servers_per_cluster
        fits = np.flatnonzero((free_cores[lo:hi] >= cores[i]) & (free_mem[lo:hi] >= mem[i]))
        if fits.size == 0:
            unplaced += 1
            continue
        s = lo + int(fits[0] if pack[i] else fits[rng.integers(fits.size)])
        free_cores[s] -= cores[i]
        free_mem[s] -= mem[i]
        hints[i] = s
        heapq.heappush(running, (departures[i], s, int(cores[i]), int(mem[i])))
    if unplaced:
        logger.warning(f"Generator could not place {unplaced} VMs; they carry no server hint")
    return hints


def generate_trace(cfg):
    cfg.validate()
    if cfg.n_vms == 0:
        return []

    n = cfg.n_vms
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(7)
    rng_cust, rng_size, rng_time, rng_um, rng_slow, rng_feat, rng_place = [np.random.default_rng(s) for s in streams]

    # customers and home clusters
    n_customers = max(1, math.ceil(n / cfg.vms_per_customer))
    ranks = np.arange(1, n_customers + 1, dtype=float)
    popularity = ranks ** -cfg.customer_zipf_exponent
    popularity /= popularity.sum()
    customer = rng_cust.choice(n_customers, size=n, p=popularity)
    cluster_of = customer % cfg.n_clusters

    # sizes
    type_names = list(cfg.vm_types)
    type_cores = np.array([cfg.vm_types[t][0] for t in type_names])
    type_mem = np.array([cfg.vm_types[t][1] for t in type_names])
    type_w = np.array([cfg.vm_types[t][2] for t in type_names], dtype=float)
    vm_type = rng_size.choice(len(type_names), size=n, p=type_w / type_w.sum())
    cores = type_cores[vm_type]
    mem = type_mem[vm_type]

    # arrivals: Poisson at the rate that holds the target core utilization
    lt = rng_time.lognormal(math.log(cfg.lifetime_median_s), cfg.lifetime_sigma, size=n)
    lifetime = np.clip(np.rint(lt), config.LIFETIME_MIN_S, config.LIFETIME_MAX_S).astype(np.int64)
    mean_life = cfg.lifetime_median_s * math.exp(cfg.lifetime_sigma ** 2 / 2)
    mean_cores = float((type_cores * type_w).sum() / type_w.sum())
    total_cores = cfg.n_clusters * cfg.servers_per_cluster * cfg.cores_per_server
    rate = cfg.target_core_utilization * total_cores / (mean_cores * mean_life)
    arrival = np.floor(np.cumsum(rng_time.exponential(1.0 / rate, size=n))).astype(np.int64)
    arrival -= arrival[0]

    # untouched memory: customer latent mean + per-VM noise, centred on the target median
    a, b = _beta_params(cfg.untouched_median, cfg.untouched_concentration)
    # customer levels come from the shared population, so traces with other seeds see the same customers
    latent = np.random.default_rng(cfg.population_seed).beta(a, b, size=n_customers)
    um = latent[customer] + rng_um.normal(0.0, cfg.untouched_vm_noise, size=n)
    um = um + (cfg.untouched_median - np.median(um))
    um = np.round(np.clip(um, 0.0, 1.0), 6)

    # slowdowns share one latent rank across scenarios
    rank = rng_slow.random(n)
    slowdowns = {name: np.round(_mixture_quantile(rank, w), 6) for name, w in cfg.slowdown_mixture.items()}
    lo_e, hi_e = config.CURVE_EXPONENT_RANGE
    exponent = np.round(rng_slow.uniform(lo_e, hi_e, size=n), 6)

    # PMU telemetry tracks the lowest-latency scenario's slowdown
    base = slowdowns.get(config.DEFAULT_SCENARIO, next(iter(slowdowns.values())))
    dram_bound = np.clip(base * config.DRAM_BOUND_SCALE + rng_feat.normal(0, config.DRAM_BOUND_NOISE, n), 0, 1)
    memory_bound = np.clip(base * config.DRAM_BOUND_SCALE + config.MEMORY_BOUND_EXTRA
                           + rng_feat.normal(0, config.MEMORY_BOUND_NOISE, n), 0, 1)
    dram_bound = np.round(dram_bound, 6)
    memory_bound = np.round(memory_bound, 6)

    hints = _place(arrival, arrival + lifetime, cores, mem, cluster_of, cfg, rng_place)

    trace = []
    for i in range(n):
        gt = WorkloadGroundTruth(
            untouched_fraction=float(um[i]),
            slowdown_full_pool={name: float(s[i]) for name, s in slowdowns.items()},
            curve_exponent=float(exponent[i]),
        )
        trace.append(VmRequest(
            vm_id=i,
            customer_id=f"c{customer[i]:05d}",
            vm_type=type_names[vm_type[i]],
            arrival=int(arrival[i]),
            lifetime=int(lifetime[i]),
            cores=int(cores[i]),
            memory_gb=int(mem[i]),
            server_hint=hints[i],
            ground_truth=gt,
            dram_bound=float(dram_bound[i]),
            memory_bound=float(memory_bound[i]),
        ))
    logger.info(f"Generated {n} VMs for {n_customers} customers over {trace[-1].arrival / 86400:.1f} days")
    return trace


def trace_summary(trace, scenarios=None):
    """Calibration statistics of a trace (class marginals, untouched median, span)."""
    if not trace:
        return {"n_vms": 0}
    edges = config.SLOWDOWN_CLASS_EDGES
    scenarios = scenarios or sorted(trace[0].ground_truth.slowdown_full_pool)
    um = np.array([vm.ground_truth.untouched_fraction for vm in trace])
    out = {
        "n_vms": len(trace),
        "span_days": round(trace[-1].arrival / 86400, 3),
        "untouched_median": float(np.median(um)),
        "share_untouched_gt_20pct": float((um > 0.2).mean()),
        "slowdown_classes": {},
    }
    for name in scenarios:
        s = np.array([vm.ground_truth.slowdown_full_pool[name] for vm in trace])
        counts = np.histogram(s, bins=list(edges[:-1]) + [np.inf])[0]
        out["slowdown_classes"][name] = [float(c) / len(trace) for c in counts]
    return out


# ---------------------------------------------------------
# TRACE FILES
# ---------------------------------------------------------
BASE_COLUMNS = ["vm_id", "customer_id", "vm_type", "arrival", "lifetime", "cores", "memory_gb",
                "server_hint", "untouched_fraction", "curve_exponent", "dram_bound", "memory_bound"]
INT_COLUMNS = {"vm_id", "arrival", "lifetime", "cores", "memory_gb"}
FLOAT_COLUMNS = {"untouched_fraction", "curve_exponent", "dram_bound", "memory_bound"}


def _columns_for(scenarios):
    return BASE_COLUMNS + [f"slowdown_{s}" for s in scenarios]


def write_trace(trace, path):
    trace = sorted(trace, key=lambda vm: (vm.arrival, vm.vm_id))
    scenarios = sorted(trace[0].ground_truth.slowdown_full_pool) if trace else sorted(config.LATENCY_SCENARIOS)
    rows = []
    for vm in trace:
        gt = vm.ground_truth
        row = {
            "vm_id": str(vm.vm_id),
            "customer_id": vm.customer_id,
            "vm_type": vm.vm_type,
            "arrival": str(vm.arrival),
            "lifetime": str(vm.lifetime),
            "cores": str(vm.cores),
            "memory_gb": str(vm.memory_gb),
            "server_hint": "" if vm.server_hint is None else str(vm.server_hint),
            "untouched_fraction": FRACTION_FMT.format(gt.untouched_fraction),
            "curve_exponent": FRACTION_FMT.format(gt.curve_exponent),
            "dram_bound": FRACTION_FMT.format(vm.dram_bound),
            "memory_bound": FRACTION_FMT.format(vm.memory_bound),
        }
        for s in scenarios:
            row[f"slowdown_{s}"] = FRACTION_FMT.format(gt.slowdown_full_pool[s])
        rows.append(row)

    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    df = pd.DataFrame(rows, columns=_columns_for(scenarios))
    tmp = f"{path}.tmp"
    df.to_csv(tmp, index=False, lineterminator="\n", encoding="utf-8")
    os.replace(tmp, path)
    logger.info(f"Wrote {len(trace)} VMs to {path}")


def _cell(value, name, line):
    if value is None or (isinstance(value, float) and math.isnan(value)) or str(value).strip() == "":
        raise SchemaError("missing value", line=line, field=name)
    return str(value).strip()


def read_trace(path):
    if not os.path.exists(path):
        raise MissingFileError(f"trace file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise SchemaError("empty trace file", line=1)
    except pd.errors.ParserError as e:
        m = re.search(r"line (\d+)", str(e))
        raise SchemaError(f"malformed record: {e}", line=int(m.group(1)) if m else None)

    for col in BASE_COLUMNS:
        if col not in df.columns:
            raise SchemaError("header is missing a column", line=1, field=col)
    scenarios = sorted(c[len("slowdown_"):] for c in df.columns if c.startswith("slowdown_"))
    if not scenarios:
        raise SchemaError("header has no slowdown_<scenario> column", line=1)

    trace = []
    last_arrival = None
    for idx, rec in enumerate(df.to_dict("records")):
        line = idx + 2
        vals = {}
        for col in _columns_for(scenarios):
            raw = rec.get(col)
            if col == "server_hint":
                vals[col] = None if raw is None or (isinstance(raw, float) and math.isnan(raw)) or str(raw).strip() == "" else raw
                continue
            vals[col] = _cell(raw, col, line)
        try:
            ints = {c: int(vals[c]) for c in INT_COLUMNS}
            floats = {c: float(vals[c]) for c in FLOAT_COLUMNS}
            slow = {s: float(vals[f"slowdown_{s}"]) for s in scenarios}
            hint = None if vals["server_hint"] is None else int(vals["server_hint"])
        except ValueError as e:
            raise SchemaError(f"bad number: {e}", line=line)
        if last_arrival is not None and ints["arrival"] < last_arrival:
            raise ValidationError(f"arrivals not sorted at line {line}")
        last_arrival = ints["arrival"]
        try:
            gt = WorkloadGroundTruth(floats["untouched_fraction"], slow, floats["curve_exponent"])
            vm = VmRequest(
                vm_id=ints["vm_id"], customer_id=vals["customer_id"], vm_type=vals["vm_type"],
                arrival=ints["arrival"], lifetime=ints["lifetime"], cores=ints["cores"],
                memory_gb=ints["memory_gb"], server_hint=hint, ground_truth=gt,
                dram_bound=floats["dram_bound"], memory_bound=floats["memory_bound"],
            )
        except ValidationError as e:
            raise ValidationError(f"line {line}: {e}")
        trace.append(vm)
    logger.info(f"Read {len(trace)} VMs from {path}")
    return trace


def trace_config_dict(cfg):
    return asdict(cfg)
