# Data storage & output settings
DATA_DIR = "data"

# Logging settings
LOG_DIR = "logs"
LOG_FILE = "pondsim.log"
LOG_MAX_BYTES = 1_000_000   # 1 MB per log file
LOG_BACKUP_COUNT = 5        # keep up to 5 rotated log files
LOG_LEVEL = "INFO"

# ---------------------------------------------------------
# TRACE GENERATION
# ---------------------------------------------------------
N_VMS = 10_000
N_CLUSTERS = 1
SERVERS_PER_CLUSTER = 64
CORES_PER_SERVER = 48
DRAM_GB_PER_SERVER = 384
RNG_SEED = 42
# Customer population (popularity ranks, untouched-memory levels) shared by every trace
POPULATION_SEED = 2022

# Share of placements packed onto the first fitting server; the rest spread at random
PLACEMENT_PACK_SHARE = 0.2

# Target share of cores rented at steady state; drives the arrival rate
TARGET_CORE_UTILIZATION = 0.80
LIFETIME_MEDIAN_S = 6 * 3600
LIFETIME_SIGMA = 1.2          # lognormal shape
LIFETIME_MIN_S = 60
LIFETIME_MAX_S = 14 * 86400

# VM sizes: name -> (cores, memory_gb, weight)
VM_TYPES = {
    "F2": (2, 4, 0.08),
    "F4": (4, 8, 0.06),
    "F8": (8, 16, 0.04),
    "D2": (2, 8, 0.18),
    "D4": (4, 16, 0.16),
    "D8": (8, 32, 0.12),
    "D16": (16, 64, 0.06),
    "E2": (2, 16, 0.10),
    "E4": (4, 32, 0.10),
    "E8": (8, 64, 0.06),
    "E16": (16, 128, 0.04),
}

# Customers: VM counts per customer follow a Zipf-like popularity
VMS_PER_CUSTOMER = 100
CUSTOMER_ZIPF_EXPONENT = 0.6

# Untouched memory: per-customer latent mean ~ Beta, per-VM gaussian noise
UNTOUCHED_MEDIAN = 0.50
UNTOUCHED_BETA_CONCENTRATION = 2.5   # alpha + beta of the customer-level Beta
UNTOUCHED_VM_NOISE = 0.05            # per-customer consistency (stddev)

# Slowdown class edges (fraction) and mixture weights per latency scenario
SLOWDOWN_CLASS_EDGES = (0.0, 0.01, 0.05, 0.25, 0.60)
SLOWDOWN_MIXTURE = {
    "182": (0.26, 0.17, 0.36, 0.21),
    "222": (0.23, 0.14, 0.26, 0.37),
}
CURVE_EXPONENT_RANGE = (0.2, 1.0)   # < 1: concave slowdown vs. spill

# PMU-derived telemetry: dram_bound ~ slowdown_182 * scale + noise
DRAM_BOUND_SCALE = 1.0
DRAM_BOUND_NOISE = 0.03
MEMORY_BOUND_EXTRA = 0.10
MEMORY_BOUND_NOISE = 0.005

# ---------------------------------------------------------
# POOL HARDWARE
# ---------------------------------------------------------
SLICE_GB = 1
MAX_HOSTS_PER_EMC = 64
POOL_SIZES = (8, 16, 32, 64)
DIRECT_ATTACH_MAX_SOCKETS = 16
RETIMER_MIN_SOCKETS = 64            # cable runs past ~500mm need retimers on top of the switch

# (local_ns, pool_ns); the scenario name is pool_ns / local_ns as a percentage
LATENCY_SCENARIOS = {
    "182": (78, 142),
    "222": (78, 173),
}
DEFAULT_SCENARIO = "182"

# Added latency vs NUMA-local DRAM per pool size (EMC port + switch), retimers on top
POOL_ADDED_NS = {8: 70, 16: 90, 32: 180, 64: 180}
RETIMER_ADDED_NS = 30

# Offlining 10-100 ms/GB, onlining microseconds/GB, migration 50 ms per pool GB
OFFLINE_MS_PER_GB = (10.0, 100.0)
OFFLINE_MS_PER_GB_BOUNDS = (10.0, 100.0)
ONLINE_US_PER_GB = 5.0
MIGRATION_MS_PER_POOL_GB = 50.0

# Telemetry costs: PMU sample every second (1 ms), access-bit scan every 30 min (10 s)
PMU_SAMPLE_PERIOD_S = 1
PMU_SAMPLE_COST_MS = 1.0
ACCESS_BIT_SCAN_PERIOD_S = 1800
ACCESS_BIT_SCAN_COST_S = 10.0

SNAPSHOT_MAGIC = b"EMCSLICE"

# ---------------------------------------------------------
# PREDICTION MODELS
# ---------------------------------------------------------
HISTORY_DAYS = 7
HISTORY_PERCENTILES = (50, 80, 90, 95, 99)
MIN_CALIBRATION_SAMPLES = 100
GRID_STEP = 0.1                     # percentage points
OP_TARGETS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0)
STATIC_FRACTIONS = tuple(round(0.01 * i, 2) for i in range(0, 61))
FOREST_N_STUMPS = 32
FOREST_SAMPLE_FRACTION = 0.7
MODEL_SNAPSHOT_VERSION = 1

DEFAULT_PDM = 0.05
DEFAULT_TP = 98.0

# ---------------------------------------------------------
# CONTROL PLANE / QOS
# ---------------------------------------------------------
BUFFER_MIN_SLICES = 8
BUFFER_POOL_FRACTION = 0.01
QOS_TICK_S = 1
QOS_NOISE_STD = 0.01
QOS_EWMA_ALPHA = 0.2
QOS_MIN_SAMPLES = 5
QOS_SETTLE_SAMPLES = 300
MITIGATION_BUDGET_PCT = 1.0
MITIGATION_WINDOW_S = 3600
RESIDUAL_POOL_ACCESS = 0.0025       # share of accesses hitting zNUMA even when it is unused
STATIC_POOL_FRACTION = 0.15

# ---------------------------------------------------------
# SIMULATION
# ---------------------------------------------------------
POOL_GB_PER_SOCKET = 192            # pool capacity per socket in a pool group
STRANDING_SAMPLE_S = 3600
STRANDING_BUCKET_PCT = 5
OFFLINE_RATE_THRESHOLDS_GBPS = (1.0, 10.0)
VM_START_BUDGET_S = 1.0
