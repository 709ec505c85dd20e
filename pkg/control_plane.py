"""
control_plane.py
================
Pool management and the two control-plane workflows.

  A) VM scheduling: predict latency sensitivity and untouched memory, size the
     zNUMA node, draw slices from the ready buffer (never wait on offlining),
     reserve local DRAM, fall back to another server in the cluster if needed.
  B) QoS monitoring: sample a noisy slowdown estimate for VMs that spilled into
     the pool and migrate them to local DRAM once, within a 1%-per-hour budget.

All state here is owned by the simulator's event loop. Operations that start
asynchronous work (slice drains, migrations) return the events to schedule.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

import config
from errors import ConfigError, SimStateError
from logs import get_logger
from pool_hw import PoolTopology, SliceTable, TimingModel, assign_slices, release_slices
from predictors import (classify_latency_insensitive, features_of, predict_untouched,
                        required_history)
from vm_trace import slowdown_at

logger = get_logger("control_plane")

ALL_LOCAL = "all_local"
STATIC = "static"
POND = "pond"

# Event kinds and their tie-break priority at equal timestamps
DRAIN = "drain"
MIGRATION = "migration"
EXIT = "exit"
ARRIVAL = "arrival"
QOS = "qos"
PRIORITY = {DRAIN: 0, MIGRATION: 0, EXIT: 1, ARRIVAL: 2, QOS: 3}


# ---------------------------------------------------------
# TYPES
# ---------------------------------------------------------
@dataclass(frozen=True)
class MemorySplit:
    local_gb: int
    pool_gb: int
    source_slices: frozenset = frozenset()

    def __post_init__(self):
        if self.local_gb < 0 or self.pool_gb < 0:
            raise SimStateError("memory split cannot be negative")
        if len(self.source_slices) != self.pool_gb:
            raise SimStateError(f"pool_gb={self.pool_gb} but {len(self.source_slices)} slices")

    @property
    def memory_gb(self):
        return self.local_gb + self.pool_gb


@dataclass(frozen=True)
class PoolBuffer:
    free_slices_ready: int
    slices_draining: int
    assigned: int
    total: int
    completions: tuple = ()


@dataclass
class QosState:
    ewma: float = 0.0
    samples: int = 0
    calm: int = 0
    migrated: bool = False
    migrating: bool = False
    deferred: int = 0
    settled: bool = False


@dataclass
class ActiveVm:
    vm: object
    server: int
    split: MemorySplit
    start: float
    qos: QosState = field(default_factory=QosState)
    since: float = 0.0                   # start of the current split


@dataclass(frozen=True)
class ControlConfig:
    mode: str = POND
    static_fraction: float = 0.0
    pdm: float = config.DEFAULT_PDM
    scenario: str = config.DEFAULT_SCENARIO
    mitigation: bool = True
    qos_noise_std: float = config.QOS_NOISE_STD
    qos_alpha: float = config.QOS_EWMA_ALPHA
    qos_min_samples: int = config.QOS_MIN_SAMPLES
    qos_settle_samples: int = config.QOS_SETTLE_SAMPLES
    budget_pct: float = config.MITIGATION_BUDGET_PCT
    budget_window_s: float = config.MITIGATION_WINDOW_S
    buffer_min_slices: int = config.BUFFER_MIN_SLICES
    buffer_pool_fraction: float = config.BUFFER_POOL_FRACTION

    def __post_init__(self):
        if self.mode not in (ALL_LOCAL, STATIC, POND):
            raise ConfigError(f"unknown policy mode '{self.mode}'")
        if not 0.0 <= self.static_fraction <= 1.0:
            raise ConfigError("static fraction must be in [0, 1]")


@dataclass(frozen=True)
class SchedulingModels:
    """Frozen view the POND scheduler predicts with; swapped at day boundaries."""
    snapshot: object
    target_fp: float
    target_op: float

    def with_snapshot(self, snapshot):
        return SchedulingModels(snapshot, self.target_fp, self.target_op)


@dataclass(frozen=True)
class Placement:
    vm_id: int
    server: int
    split: MemorySplit
    moved: bool
    insensitive: bool
    demand_gbps: float


@dataclass(frozen=True)
class Migration:
    vm_id: int
    server: int
    pool_gb: int
    start: float
    done: float


# ---------------------------------------------------------
# EVENT LOG
# ---------------------------------------------------------
class EventLog:
    """Line-delimited JSON records; keeps them in memory when no path is given."""

    def __init__(self, path=None, keep=False):
        self.path = path
        self.records = [] if keep or path is None else None
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def emit(self, t, kind, **fields):
        rec = {"t": round(float(t), 6), "event": kind, **fields}
        if self.records is not None:
            self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


class _NullLog(EventLog):
    def __init__(self):
        self.path = None
        self.records = None
        self._fh = None

    def emit(self, t, kind, **fields):
        pass


# ---------------------------------------------------------
# CLUSTER STATE
# ---------------------------------------------------------
@dataclass
class PoolGroup:
    index: int
    first_server: int
    topology: PoolTopology
    table: SliceTable
    buffer_target: int
    draining: dict = field(default_factory=dict)     # slice -> completion time
    used: int = 0                                    # assigned + draining
    peak_used: int = 0
    low: bool = False
    low_water_events: int = 0

    def buffer(self):
        ready = self.table.n_slices - self.used
        return PoolBuffer(
            free_slices_ready=ready,
            slices_draining=len(self.draining),
            assigned=self.used - len(self.draining),
            total=self.table.n_slices,
            completions=tuple(sorted(self.draining.values())),
        )

    @property
    def ready(self):
        return self.table.n_slices - self.used


class ClusterState:
    def __init__(self, cluster, ctl, event_log=None, timing=None):
        self.cluster = cluster
        self.ctl = ctl
        self.timing = timing or TimingModel()
        self.log = event_log or _NullLog()
        n = cluster.n_servers
        self.free_cores = np.full(n, cluster.cores_per_server, dtype=np.int64)
        self.free_mem = np.full(n, cluster.local_dram_gb, dtype=np.int64)
        self.peak_local = np.zeros(n, dtype=np.int64)
        self.group_of = np.arange(n) // cluster.pool_sockets
        capacity = cluster.pool_gb_per_socket * cluster.pool_sockets // config.SLICE_GB
        emcs = max(1, math.ceil(capacity / 1024))
        self.groups = []
        for g in range(n // cluster.pool_sockets):
            topo = PoolTopology(cluster.pool_sockets, emcs, 1024)
            target = max(ctl.buffer_min_slices, math.ceil(ctl.buffer_pool_fraction * capacity))
            self.groups.append(PoolGroup(g, g * cluster.pool_sockets, topo,
                                         SliceTable(capacity, cluster.pool_sockets), target))
        self.active = {}
        self.watch = set()                # VMs still sampled by QoS monitoring
        self.migration_starts = deque()
        self.failures = 0
        self.moved = 0
        self.migrations = 0
        self.deferred_vms = set()
        self.deferral_events = 0
        self.offline_demand = []
        self.mispredicted = 0
        self.finished = 0
        self.pool_gb_s = 0.0             # pool GB x seconds actually held
        self.memory_gb_s = 0.0
        self.pool_access = []            # access share on the zNUMA node, VMs that had one

    # -- helpers -------------------------------------------------------
    def host_of(self, server):
        return int(server % self.cluster.pool_sockets)

    def group_for(self, server):
        return self.groups[int(self.group_of[server])]

    def cluster_range(self, server_hint):
        per = self.cluster.servers_per_cluster
        if server_hint is None or not 0 <= server_hint < self.cluster.n_servers:
            return 0, self.cluster.n_servers
        lo = (server_hint // per) * per
        return lo, lo + per

    def _note_local(self, server):
        used = self.cluster.local_dram_gb - self.free_mem[server]
        if used > self.peak_local[server]:
            self.peak_local[server] = used

    def _note_pool(self, group):
        if group.used > group.peak_used:
            group.peak_used = group.used
        low = group.ready < group.buffer_target
        if low and not group.low:
            group.low_water_events += 1
            logger.debug(f"Pool {group.index} buffer below target ({group.ready} < {group.buffer_target})")
        group.low = low

    def check_conservation(self):
        """Capacity assertion scan: nothing negative, every pool slice accounted for."""
        if (self.free_cores < 0).any() or (self.free_mem < 0).any():
            raise SimStateError("negative server capacity")
        if (self.free_mem > self.cluster.local_dram_gb).any():
            raise SimStateError("server DRAM above capacity")
        for g in self.groups:
            b = g.buffer()
            owned = g.table.n_slices - g.table.free_count()
            if owned != g.used or b.free_slices_ready + b.slices_draining + b.assigned != b.total:
                raise SimStateError(f"pool {g.index} slice accounting broken")


# ---------------------------------------------------------
# WORKFLOW A: SCHEDULING
# ---------------------------------------------------------
def znuma_spill(vm, split):
    touched = vm.touched_gb
    if touched <= 0:
        return 0.0
    return max(0.0, touched - split.local_gb) / touched


def pool_access_share(vm, split):
    """Share of accesses hitting the zNUMA node.

    A correctly sized node still sees a small residual share (guest kernel
    allocations); slowdown only depends on spill.
    """
    if split.pool_gb == 0:
        return 0.0
    return max(config.RESIDUAL_POOL_ACCESS, znuma_spill(vm, split))


def desired_pool_gb(req, ctl, models):
    """zNUMA size before the ready-buffer cap, and whether the VM was judged insensitive."""
    if ctl.mode == ALL_LOCAL:
        return 0, False
    if ctl.mode == STATIC:
        return int(math.floor(req.memory_gb * ctl.static_fraction + 1e-9)), False
    snap = models.snapshot
    history = snap.history
    if history.observations(req.customer_id).size > 0:
        model = snap.model_for(ctl.scenario)
        if classify_latency_insensitive(features_of(req), ctl.pdm, models.target_fp, model):
            return req.memory_gb, True
    if models.target_op <= 0:
        return 0, False
    um = predict_untouched(history, req.customer_id, models.target_op,
                           min_history=required_history(models.target_op))
    return int(math.floor(req.memory_gb * um + 1e-9)), False


def schedule_vm(req, state, models, ctl, now=0.0):
    """Place a VM; returns a Placement, or None after recording a scheduling failure."""
    want, insensitive = desired_pool_gb(req, ctl, models)
    lo, hi = state.cluster_range(req.server_hint)
    servers = np.arange(lo, hi)
    ready = np.array([g.ready for g in state.groups])[state.group_of[servers]]
    grant = np.minimum(want, ready)
    fits = (state.free_cores[servers] >= req.cores) & (state.free_mem[servers] >= req.memory_gb - grant)
    if req.server_hint is not None and lo <= req.server_hint < hi and fits[req.server_hint - lo]:
        k = req.server_hint - lo
    else:
        idx = np.flatnonzero(fits)
        if idx.size == 0:
            state.failures += 1
            state.log.emit(now, "fail", vm=req.vm_id, cores=req.cores, memory_gb=req.memory_gb)
            logger.warning(f"No server fits VM {req.vm_id} ({req.cores} cores, {req.memory_gb} GB)")
            return None
        k = int(idx[0])
    server = int(servers[k])
    pool_gb = int(grant[k])
    moved = req.server_hint is not None and server != req.server_hint
    if moved:
        state.moved += 1

    group = state.group_for(server)
    slices = assign_slices(group.table, state.host_of(server), pool_gb) if pool_gb else set()
    group.used += pool_gb
    split = MemorySplit(req.memory_gb - pool_gb, pool_gb, frozenset(slices))
    state.free_cores[server] -= req.cores
    state.free_mem[server] -= split.local_gb
    state._note_local(server)
    state._note_pool(group)

    # memory the buffer could not cover would have to be offlined inside the start budget
    demand = (want - pool_gb) / config.VM_START_BUDGET_S if ctl.mode != ALL_LOCAL else 0.0
    state.offline_demand.append(demand)

    av = ActiveVm(req, server, split, now, since=now)
    if znuma_spill(req, split) == 0.0 or not ctl.mitigation:
        av.qos.settled = True
    else:
        state.watch.add(req.vm_id)
    state.active[req.vm_id] = av
    state.log.emit(now, "schedule", vm=req.vm_id, server=server, pool=group.index,
                   local_gb=split.local_gb, pool_gb=pool_gb, want_gb=want,
                   touched_gb=round(req.touched_gb, 6), insensitive=insensitive, moved=moved,
                   slices=sorted(slices), demand_gbps=demand)
    return Placement(req.vm_id, server, split, moved, insensitive, demand)


def _drain(state, server, slices, now, rng):
    """Start offlining each slice independently; returns drain-complete events."""
    if not slices:
        return []
    group = state.group_for(server)
    host = state.host_of(server)
    ordered = sorted(slices)
    durations = state.timing.sample_offline_s(rng, len(ordered)) * config.SLICE_GB
    events = []
    for s, d in zip(ordered, durations):
        done = now + float(d)
        group.draining[s] = done
        events.append((done, DRAIN, (group.index, host, s)))
    return events


def on_vm_exit(vm_id, state, now, rng):
    av = state.active.pop(vm_id, None)
    if av is None:
        raise SimStateError(f"VM {vm_id} is not active")
    state.watch.discard(vm_id)
    vm, split = av.vm, av.split
    state.free_cores[av.server] += vm.cores
    state.free_mem[av.server] += split.local_gb
    if av.qos.migrating:
        # local DRAM reserved for an unfinished migration
        state.free_mem[av.server] += split.pool_gb
    events = _drain(state, av.server, split.source_slices, now, rng)

    state.pool_gb_s += split.pool_gb * (now - av.since)
    state.memory_gb_s += vm.memory_gb * (now - av.start)

    slowdown = slowdown_at(vm.ground_truth, znuma_spill(vm, split), state.ctl.scenario)
    mispredicted = slowdown > state.ctl.pdm
    access = pool_access_share(vm, split)
    if split.pool_gb:
        state.pool_access.append(access)
    state.finished += 1
    state.mispredicted += int(mispredicted)
    state.log.emit(now, "exit", vm=vm_id, server=av.server, pool_gb=split.pool_gb,
                   slowdown=round(slowdown, 6), pool_access=round(access, 6),
                   mispredicted=mispredicted, migrated=av.qos.migrated)
    return events


def on_drain_complete(state, group_index, host, slice_idx, now):
    group = state.groups[group_index]
    if group.draining.pop(slice_idx, None) is None:
        raise SimStateError(f"slice {slice_idx} of pool {group_index} is not draining")
    release_slices(group.table, host, [slice_idx])
    group.used -= 1
    group.low = group.ready < group.buffer_target
    state.log.emit(now, "drain", pool=group_index, host=host, slice=slice_idx)


# ---------------------------------------------------------
# WORKFLOW B: QOS MONITORING + MITIGATION
# ---------------------------------------------------------
def monitored(state):
    return [state.active[v] for v in sorted(state.watch)]


def mitigation_budget(state, now):
    window = state.ctl.budget_window_s
    while state.migration_starts and state.migration_starts[0] <= now - window:
        state.migration_starts.popleft()
    allowed = math.floor(state.ctl.budget_pct / 100.0 * len(state.active))
    return max(0, allowed - len(state.migration_starts))


def qos_tick(state, now, rng):
    """One monitoring pass; returns the migrations started."""
    ctl = state.ctl
    watch = monitored(state)
    if not watch:
        return []
    noise = rng.normal(0.0, ctl.qos_noise_std, size=len(watch)) if ctl.qos_noise_std > 0 else np.zeros(len(watch))
    candidates = []
    for av, eps in zip(watch, noise):
        q = av.qos
        true = slowdown_at(av.vm.ground_truth, znuma_spill(av.vm, av.split), ctl.scenario)
        sample = max(0.0, true + float(eps))
        q.ewma = sample if q.samples == 0 else ctl.qos_alpha * sample + (1 - ctl.qos_alpha) * q.ewma
        q.samples += 1
        if q.ewma > ctl.pdm and q.samples >= ctl.qos_min_samples:
            candidates.append(av)
        elif sample <= ctl.pdm:
            q.calm += 1
            if q.calm >= ctl.qos_settle_samples:
                q.settled = True
                state.watch.discard(av.vm.vm_id)
    return mitigate(state, candidates, now)


def mitigate(state, candidates, now):
    started = []
    budget = mitigation_budget(state, now)
    for av in candidates:
        q = av.qos
        if q.migrated or q.migrating:
            continue
        pool_gb = av.split.pool_gb
        if budget <= 0:
            reason = "budget"
        elif state.free_mem[av.server] < pool_gb:
            reason = "no_local_dram"
        else:
            reason = None
        if reason:
            q.deferred += 1
            state.deferral_events += 1
            state.deferred_vms.add(av.vm.vm_id)
            state.log.emit(now, "defer", vm=av.vm.vm_id, reason=reason)
            continue
        state.free_mem[av.server] -= pool_gb
        state._note_local(av.server)
        q.migrating = True
        state.watch.discard(av.vm.vm_id)
        budget -= 1
        state.migration_starts.append(now)
        m = Migration(av.vm.vm_id, av.server, pool_gb, now, now + state.timing.migration_s(pool_gb))
        started.append(m)
        state.log.emit(now, "migrate_start", vm=m.vm_id, pool_gb=pool_gb, done=round(m.done, 6))
    if started:
        logger.debug(f"Started {len(started)} migrations at t={now:.0f}s")
    return started


def on_migration_complete(state, vm_id, now, rng):
    av = state.active.get(vm_id)
    if av is None:
        raise SimStateError(f"migrating VM {vm_id} is not active")
    old = av.split
    state.pool_gb_s += old.pool_gb * (now - av.since)
    av.since = now
    av.split = MemorySplit(old.local_gb + old.pool_gb, 0, frozenset())
    av.qos.migrating = False
    av.qos.migrated = True
    state.migrations += 1
    state.log.emit(now, "migrate", vm=vm_id, pool_gb=old.pool_gb)
    return _drain(state, av.server, old.source_slices, now, rng)


def vms_on_emc(state, group_index, emc):
    """VMs holding slices on one EMC; the blast radius of its failure."""
    group = state.groups[group_index]
    hit = []
    for vm_id, av in state.active.items():
        if int(state.group_of[av.server]) != group_index:
            continue
        if any(group.topology.emc_of_slice(s) == emc for s in av.split.source_slices):
            hit.append(vm_id)
    return sorted(hit)
