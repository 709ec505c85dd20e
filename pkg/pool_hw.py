"""
pool_hw.py
==========
External memory controller (EMC) model: slice permission table, pool topology,
pool latency vs pool size, offline/online timing and telemetry costs.

One slice = 1 GB. A slice has at most one owning host; an access is allowed
only when the requestor owns the slice, anything else is a fatal memory error.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

import config
from errors import CapacityError, ConfigError, OwnershipError, SchemaError, SliceRangeError
from logs import get_logger

logger = get_logger("pool_hw")

UNASSIGNED = -1
ALLOWED = "allowed"
FATAL = "fatal"

HEADER = struct.Struct("<8sII")   # magic, n_slices, n_hosts -> 16 bytes


# ---------------------------------------------------------
# SLICE TABLE
# ---------------------------------------------------------
@dataclass
class SliceTable:
    n_slices: int
    n_hosts: int
    owner: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_slices < 0:
            raise ConfigError("n_slices must be >= 0")
        if not 1 <= self.n_hosts <= config.MAX_HOSTS_PER_EMC:
            raise ConfigError(f"n_hosts must be in [1, {config.MAX_HOSTS_PER_EMC}]")
        if self.owner is None:
            self.owner = np.full(self.n_slices, UNASSIGNED, dtype=np.int16)

    def free_count(self):
        return int((self.owner == UNASSIGNED).sum())

    def owned_by(self, host):
        return set(np.flatnonzero(self.owner == host).tolist())

    def copy(self):
        return SliceTable(self.n_slices, self.n_hosts, self.owner.copy())


def _check_host(t, host):
    if not 0 <= host < t.n_hosts:
        raise ConfigError(f"host {host} outside [0, {t.n_hosts})")


def assign_slices(t, host, k):
    """Give k free slices to host, lowest index first."""
    _check_host(t, host)
    if k < 0:
        raise ConfigError("k must be >= 0")
    if k == 0:
        return set()
    free = np.flatnonzero(t.owner == UNASSIGNED)
    if free.size < k:
        raise CapacityError(f"need {k} free slices, only {free.size} left")
    chosen = free[:k]
    t.owner[chosen] = host
    return set(chosen.tolist())


def release_slices(t, host, slices):
    _check_host(t, host)
    idx = np.fromiter(slices, dtype=np.int64)
    if idx.size == 0:
        return
    if (idx < 0).any() or (idx >= t.n_slices).any():
        raise SliceRangeError(f"slice index out of range [0, {t.n_slices})")
    wrong = idx[t.owner[idx] != host]
    if wrong.size:
        raise OwnershipError(f"host {host} does not own slices {wrong[:8].tolist()}")
    t.owner[idx] = UNASSIGNED


def check_access(t, requestor_host, slice_idx):
    if not 0 <= slice_idx < t.n_slices:
        raise SliceRangeError(f"slice {slice_idx} outside [0, {t.n_slices})")
    return ALLOWED if int(t.owner[slice_idx]) == requestor_host else FATAL


def bits_per_entry(n_hosts):
    if not 1 <= n_hosts <= config.MAX_HOSTS_PER_EMC:
        raise ConfigError(f"n_hosts must be in [1, {config.MAX_HOSTS_PER_EMC}]")
    # a single host still needs one bit per entry
    return max(1, math.ceil(math.log2(n_hosts)))


def state_bytes(n_slices, n_hosts):
    return math.ceil(n_slices * bits_per_entry(n_hosts) / 8)


def export_snapshot(t):
    """16-byte header + packed owner codes, little-endian bit order. UNASSIGNED packs as 0."""
    bits = bits_per_entry(t.n_hosts)
    codes = np.where(t.owner == UNASSIGNED, 0, t.owner).astype(np.uint8)
    # entry i occupies bits [i*bits, (i+1)*bits) of the little-endian bit stream
    bitplanes = ((codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    payload = np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()
    return HEADER.pack(config.SNAPSHOT_MAGIC, t.n_slices, t.n_hosts) + payload


def decode_snapshot(blob):
    if len(blob) < HEADER.size:
        raise SchemaError("snapshot shorter than its header")
    magic, n_slices, n_hosts = HEADER.unpack_from(blob)
    if magic != config.SNAPSHOT_MAGIC:
        raise SchemaError("bad snapshot magic")
    bits = bits_per_entry(n_hosts)
    expected = state_bytes(n_slices, n_hosts)
    payload = np.frombuffer(blob, dtype=np.uint8, offset=HEADER.size)
    if payload.size != expected:
        raise SchemaError(f"snapshot payload is {payload.size} bytes, expected {expected}")
    flat = np.unpackbits(payload, bitorder="little")[: n_slices * bits].reshape(n_slices, bits)
    codes = (flat.astype(np.int64) << np.arange(bits)).sum(axis=1)
    return n_slices, n_hosts, codes


# ---------------------------------------------------------
# TOPOLOGY / LATENCY / TIMING
# ---------------------------------------------------------
@dataclass(frozen=True)
class PoolTopology:
    pool_sockets: int = 16
    emcs_per_pool: int = 1
    slices_per_emc: int = 1024

    def __post_init__(self):
        if self.pool_sockets not in config.POOL_SIZES:
            raise ConfigError(f"unsupported pool size {self.pool_sockets}; expected one of {config.POOL_SIZES}")
        if self.emcs_per_pool < 1 or self.slices_per_emc < 1:
            raise ConfigError("need at least one EMC with one slice")

    @property
    def uses_switch(self):
        return self.pool_sockets > config.DIRECT_ATTACH_MAX_SOCKETS

    @property
    def uses_retimers(self):
        return self.pool_sockets >= config.RETIMER_MIN_SOCKETS

    @property
    def total_slices(self):
        return self.emcs_per_pool * self.slices_per_emc

    def emc_of_slice(self, slice_idx):
        if not 0 <= slice_idx < self.total_slices:
            raise SliceRangeError(f"slice {slice_idx} outside [0, {self.total_slices})")
        return slice_idx // self.slices_per_emc


@dataclass(frozen=True)
class LatencyScenario:
    name: str
    local_ns: float
    pool_ns: float

    def __post_init__(self):
        if self.pool_ns <= self.local_ns:
            raise ConfigError(f"scenario {self.name}: pool latency must exceed local latency")


def latency_scenario(name):
    if name not in config.LATENCY_SCENARIOS:
        raise ConfigError(f"unknown latency scenario '{name}'; known: {sorted(config.LATENCY_SCENARIOS)}")
    local_ns, pool_ns = config.LATENCY_SCENARIOS[name]
    return LatencyScenario(name, local_ns, pool_ns)


def pool_latency_ns(topo, base):
    """Latency added over NUMA-local DRAM for a pool of this size."""
    added = config.POOL_ADDED_NS.get(topo.pool_sockets)
    if added is None:
        raise ConfigError(f"no latency figure for pool size {topo.pool_sockets}")
    if topo.uses_retimers:
        added += config.RETIMER_ADDED_NS
    return float(added)


def latency_increase_pct(base, added_ns=None):
    """Pool latency as a percentage of NUMA-local latency (142/78 -> 182)."""
    pool_ns = base.pool_ns if added_ns is None else base.local_ns + added_ns
    return 100.0 * pool_ns / base.local_ns


@dataclass(frozen=True)
class TimingModel:
    offline_ms_per_gb: tuple = config.OFFLINE_MS_PER_GB
    online_us_per_gb: float = config.ONLINE_US_PER_GB
    migration_ms_per_pool_gb: float = config.MIGRATION_MS_PER_POOL_GB

    def __post_init__(self):
        lo, hi = self.offline_ms_per_gb
        floor, ceil = config.OFFLINE_MS_PER_GB_BOUNDS
        if not floor <= lo <= hi <= ceil:
            raise ConfigError(f"offline range must satisfy {floor:g} <= lo <= hi <= {ceil:g} ms/GB, got {lo}-{hi}")
        if lo * 1000.0 < 1000.0 * self.online_us_per_gb:
            raise ConfigError("offlining must be at least 1000x slower than onlining")

    def sample_offline_s(self, rng, n=1):
        lo, hi = self.offline_ms_per_gb
        return rng.uniform(lo, hi, size=n) / 1000.0

    def online_s(self, gb):
        return gb * self.online_us_per_gb / 1e6

    def migration_s(self, pool_gb):
        return pool_gb * self.migration_ms_per_pool_gb / 1000.0


def telemetry_overhead_s(duration_s, n_hosts):
    """Simulated host time spent on PMU sampling and access-bit scans."""
    pmu = duration_s / config.PMU_SAMPLE_PERIOD_S * config.PMU_SAMPLE_COST_MS / 1000.0
    scans = math.floor(duration_s / config.ACCESS_BIT_SCAN_PERIOD_S) * config.ACCESS_BIT_SCAN_COST_S
    return {"pmu_s": pmu * n_hosts, "access_bit_scan_s": scans * n_hosts}
