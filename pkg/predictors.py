"""
predictors.py
=============
Prediction side of the control plane:

  - untouched-memory model: per-customer empirical quantile of the untouched
    fraction seen over the last week, parameterized by a target overprediction
    rate (OP). No history -> 0 (all local).
  - latency-insensitivity model: DRAM-bound threshold or a randomized stump
    forest, parameterized by a target false-positive rate (FP).
  - tradeoff curves LI(FP) / UM(OP) and the combined optimizer

        maximize    LI(FP) + UM(OP)
        subject to  FP + OP <= 100 - TP

Rates (FP, OP, LI) are percentages of all VMs in the evaluated set; UM is the
memory-weighted percentage of VM memory claimed as untouched.
"""

import os
import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import config
from errors import CalibrationError, ConfigError, MissingFileError, ModelStateError, SchemaError
from logs import get_logger

logger = get_logger("predictors")

THRESHOLD = "dram_bound_threshold"
FOREST = "forest"
MODEL_KINDS = (THRESHOLD, FOREST)


def fp_grid():
    n = int(round(100 / config.GRID_STEP))
    return np.round(np.arange(n + 1) * config.GRID_STEP, 6)


def grid_index(pct):
    return int(math.floor(pct / config.GRID_STEP + 1e-9))


# ---------------------------------------------------------
# UNTOUCHED MEMORY HISTORY + QUANTILE MODEL
# ---------------------------------------------------------
class UntouchedHistory:
    """Per-customer ring of recent untouched-fraction observations.

    Predictions read the frozen view built by refresh(); add() only touches the
    live rings, so the simulator can swap views at day boundaries.
    """

    def __init__(self, window_s=None):
        self.window_s = window_s if window_s is not None else config.HISTORY_DAYS * 86400
        self._rings = defaultdict(deque)
        self._frozen = {}
        self.summaries = {}

    def add(self, customer, value, t=0):
        self._rings[customer].append((float(t), min(1.0, max(0.0, float(value)))))

    def add_batch(self, customer, values, t=0):
        for v in values:
            self.add(customer, v, t)
        self.refresh(now=t)

    def refresh(self, now=None):
        if now is not None:
            horizon = now - self.window_s
            for ring in self._rings.values():
                while ring and ring[0][0] < horizon:
                    ring.popleft()
        self._frozen = {c: np.sort(np.fromiter((v for _, v in ring), dtype=float))
                        for c, ring in self._rings.items() if ring}
        self.summaries = {c: {p: float(np.percentile(obs, p)) for p in config.HISTORY_PERCENTILES}
                          for c, obs in self._frozen.items()}

    def observations(self, customer):
        return self._frozen.get(customer, np.empty(0))

    def customers(self):
        return sorted(self._frozen)

    def to_dict(self):
        return {
            "window_s": self.window_s,
            "customers": {
                c: {"obs": [[t, round(v, 6)] for t, v in ring],
                    "percentiles": {str(p): round(x, 6) for p, x in self.summaries.get(c, {}).items()}}
                for c, ring in sorted(self._rings.items()) if ring
            },
        }

    @classmethod
    def from_dict(cls, d):
        h = cls(window_s=d.get("window_s"))
        for c, rec in d.get("customers", {}).items():
            for t, v in rec.get("obs", []):
                h.add(c, v, t)
        h.refresh()
        return h


def required_history(target_op):
    """Smallest history whose target_op-quantile does not clamp to the minimum."""
    return max(1, math.ceil(100.0 / target_op) - 1)


def predict_untouched(h, customer, target_op, min_history=1):
    if not target_op or target_op <= 0 or target_op > 50:
        return 0.0
    obs = h.observations(customer)
    if obs.size == 0 or obs.size < min_history:
        return 0.0
    value = float(np.quantile(obs, target_op / 100.0, method="weibull"))
    return min(1.0, max(0.0, value))


# ---------------------------------------------------------
# LATENCY SENSITIVITY MODELS
# ---------------------------------------------------------
@dataclass(frozen=True)
class SensitivityFeatures:
    dram_bound: float
    memory_bound: float
    noise: float = 0.0

    def as_row(self):
        return [self.dram_bound, self.memory_bound, self.noise]


def features_of(vm, rng=None):
    # the third channel carries no signal; the forest has to learn to ignore it
    noise = float(rng.random()) if rng is not None else 0.5
    return SensitivityFeatures(vm.dram_bound, vm.memory_bound, noise)


def feature_matrix(vms, seed=0):
    rng = np.random.default_rng(seed)
    X = np.empty((len(vms), 3))
    for i, vm in enumerate(vms):
        X[i] = features_of(vm).as_row()
    X[:, 2] = rng.random(len(vms))
    return X


def sensitivity_labels(vms, scenario, pdm):
    return np.array([vm.ground_truth.slowdown_full_pool[scenario] > pdm for vm in vms], dtype=bool)


def _sweep(risk, sensitive):
    """All cuts 'insensitive iff risk < cut' with their FP / LI percentages."""
    n = len(risk)
    order = np.argsort(risk, kind="stable")
    r = risk[order]
    s = sensitive[order].astype(np.int64)
    uniq, first = np.unique(r, return_index=True)
    cum = np.concatenate([[0], np.cumsum(s)])
    cuts = np.append(uniq, np.inf)
    counts = np.append(first, n)
    fp = cum[counts] / n * 100.0
    li = counts / n * 100.0
    return cuts, fp, li


def _cuts_on_grid(cuts, fp):
    grid = fp_grid()
    k = np.searchsorted(fp, grid + 1e-9, side="right") - 1
    return cuts[np.clip(k, 0, len(cuts) - 1)]


class SensitivityModel:
    """Base: turns features into a risk score; calibrated cuts per FP grid point."""

    kind = None

    def __init__(self):
        self.pdm = None
        self.scenario = None
        self.cut_by_grid = None

    @property
    def calibrated(self):
        return self.cut_by_grid is not None

    def risk(self, X):
        raise NotImplementedError

    def fit(self, X, sensitive, seed=0):
        return self

    def calibrate(self, X, sensitive, pdm, scenario=None, seed=0):
        if len(X) < config.MIN_CALIBRATION_SAMPLES:
            raise CalibrationError(f"need >= {config.MIN_CALIBRATION_SAMPLES} labeled samples, got {len(X)}")
        self.fit(X, sensitive, seed=seed)
        cuts, fp, li = _sweep(self.risk(X), sensitive)
        self.cut_by_grid = _cuts_on_grid(cuts, fp)
        self.pdm = pdm
        self.scenario = scenario
        return cuts, fp, li

    def cut_for(self, target_fp):
        if not self.calibrated:
            raise ModelStateError(f"{self.kind} model is not calibrated")
        return float(self.cut_by_grid[min(grid_index(max(0.0, target_fp)), len(self.cut_by_grid) - 1)])

    def predict_insensitive(self, X, target_fp):
        return self.risk(np.atleast_2d(X)) < self.cut_for(target_fp)

    def to_dict(self):
        return {
            "kind": self.kind,
            "pdm": self.pdm,
            "scenario": self.scenario,
            "cut_by_grid": None if self.cut_by_grid is None else [None if math.isinf(c) else c for c in self.cut_by_grid.tolist()],
        }

    def _load_cuts(self, d):
        self.pdm = d.get("pdm")
        self.scenario = d.get("scenario")
        cuts = d.get("cut_by_grid")
        if cuts is not None:
            self.cut_by_grid = np.array([np.inf if c is None else c for c in cuts], dtype=float)


class ThresholdModel(SensitivityModel):
    kind = THRESHOLD

    def risk(self, X):
        return np.asarray(X, dtype=float)[:, 0]

    def threshold(self, target_fp):
        return self.cut_for(target_fp)

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m._load_cuts(d)
        return m


@dataclass
class Stump:
    feature: int
    threshold: float
    scale: float

    def vote(self, X):
        # soft "insensitive" vote: ~1 well below the threshold, ~0 well above
        z = (self.threshold - X[:, self.feature]) / self.scale
        return 1.0 / (1.0 + np.exp(-np.clip(z, -50, 50)))


def _gini(pos, n):
    if n == 0:
        return 0.0
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_stump(X, y, features):
    best = (None, None, float("inf"))
    n = len(y)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order].astype(np.int64)
        cum = np.cumsum(ys)
        total = cum[-1]
        # split after position i: left = xs[:i+1]
        idx = np.flatnonzero(np.diff(xs) > 0)
        if idx.size == 0:
            continue
        left_n = idx + 1
        right_n = n - left_n
        left_pos = cum[idx]
        right_pos = total - left_pos
        pl = left_pos / left_n
        pr = right_pos / right_n
        g = (left_n * 2 * pl * (1 - pl) + right_n * 2 * pr * (1 - pr)) / n
        k = int(np.argmin(g))
        if g[k] < best[2]:
            best = (f, float((xs[idx[k]] + xs[idx[k] + 1]) / 2), float(g[k]))
    return best


class StumpForest(SensitivityModel):
    """Randomized decision stumps on bootstrap samples, averaged as soft votes."""

    kind = FOREST

    def __init__(self, n_stumps=None, sample_fraction=None, max_features=2):
        super().__init__()
        self.n_stumps = n_stumps or config.FOREST_N_STUMPS
        if self.n_stumps < 16:
            raise ConfigError("a forest needs at least 16 stumps")
        self.sample_fraction = sample_fraction or config.FOREST_SAMPLE_FRACTION
        self.max_features = max_features
        self.stumps = []

    def fit(self, X, sensitive, seed=0):
        X = np.asarray(X, dtype=float)
        rng = np.random.default_rng(seed)
        n, n_feat = X.shape
        m = max(2, int(n * self.sample_fraction))
        self.stumps = []
        for _ in range(self.n_stumps):
            idx = rng.choice(n, m, replace=True)
            feats = rng.choice(n_feat, min(self.max_features, n_feat), replace=False)
            f, thr, _ = _best_stump(X[idx], sensitive[idx], feats)
            if f is None:
                continue
            scale = max(1e-6, 0.1 * float(np.std(X[idx, f])))
            self.stumps.append(Stump(int(f), thr, scale))
        if not self.stumps:
            # labels or features are constant: every sample looks the same
            self.stumps.append(Stump(0, float("inf"), 1.0))
        return self

    def risk(self, X):
        """1 - mean soft vote; each stump votes with a logistic of the distance to its split, not a hard 0/1."""
        if not self.stumps:
            raise ModelStateError("forest has no stumps; call calibrate() first")
        X = np.asarray(X, dtype=float)
        votes = np.mean([s.vote(X) for s in self.stumps], axis=0)
        return 1.0 - votes

    def to_dict(self):
        d = super().to_dict()
        d["stumps"] = [[s.feature, s.threshold if math.isfinite(s.threshold) else None, s.scale] for s in self.stumps]
        return d

    @classmethod
    def from_dict(cls, d):
        m = cls(n_stumps=max(16, len(d.get("stumps", []))))
        m.stumps = [Stump(int(f), float("inf") if t is None else float(t), float(s)) for f, t, s in d.get("stumps", [])]
        m._load_cuts(d)
        return m


def make_model(kind):
    if kind == THRESHOLD:
        return ThresholdModel()
    if kind == FOREST:
        return StumpForest()
    raise ConfigError(f"unknown sensitivity model '{kind}'; expected one of {MODEL_KINDS}")


def classify_latency_insensitive(f, pdm, target_fp, model):
    if not model.calibrated:
        raise ModelStateError(f"{model.kind} model is not calibrated")
    if model.pdm is not None and not math.isclose(model.pdm, pdm):
        raise ModelStateError(f"model calibrated for PDM={model.pdm}, asked for PDM={pdm}")
    return bool(model.predict_insensitive(np.array([f.as_row()]), target_fp)[0])


# ---------------------------------------------------------
# TRADEOFF CURVES + COMBINED OPTIMIZER
# ---------------------------------------------------------
@dataclass(frozen=True)
class CombinedConfig:
    pdm: float = config.DEFAULT_PDM
    tp: float = config.DEFAULT_TP

    def __post_init__(self):
        if not 0 < self.pdm <= 0.25:
            raise ConfigError(f"PDM must be in (0, 0.25], got {self.pdm}")
        if not 50 < self.tp <= 100:
            raise ConfigError(f"TP must be in (50, 100], got {self.tp}")

    @property
    def budget(self):
        return 100.0 - self.tp


@dataclass
class TradeoffCurves:
    grid: np.ndarray
    li: np.ndarray                      # LI(FP) on the grid
    um: np.ndarray                      # UM(OP) on the grid
    op_target: np.ndarray = None        # quantile target reaching UM(OP) at each grid point
    scenario: Optional[str] = None
    pdm: Optional[float] = None
    model_kind: Optional[str] = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.li = np.asarray(self.li, dtype=float)
        self.um = np.asarray(self.um, dtype=float)
        if self.op_target is None:
            self.op_target = np.zeros_like(self.grid)
        self.op_target = np.asarray(self.op_target, dtype=float)
        if not (len(self.grid) == len(self.li) == len(self.um)):
            raise ConfigError("curve arrays must share the grid length")
        if (np.diff(self.li) < -1e-12).any() or (np.diff(self.um) < -1e-12).any():
            raise ConfigError("tradeoff curves must be monotone nondecreasing")
        if len(self.grid) and (self.grid[0] < 0 or self.grid[-1] > 100):
            raise ConfigError("curve domain must lie within [0, 100]")

    def li_at(self, fp):
        return float(self.li[min(grid_index(fp), len(self.li) - 1)])

    def um_at(self, op):
        return float(self.um[min(grid_index(op), len(self.um) - 1)])

    def op_target_at(self, op):
        return float(self.op_target[min(grid_index(op), len(self.op_target) - 1)])

    def to_dict(self):
        return {
            "scenario": self.scenario, "pdm": self.pdm, "model_kind": self.model_kind,
            "grid_step": config.GRID_STEP,
            "li": np.round(self.li, 6).tolist(),
            "um": np.round(self.um, 6).tolist(),
            "op_target": self.op_target.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        n = len(d["li"])
        return cls(grid=np.round(np.arange(n) * d.get("grid_step", config.GRID_STEP), 6),
                   li=d["li"], um=d["um"], op_target=d.get("op_target"),
                   scenario=d.get("scenario"), pdm=d.get("pdm"), model_kind=d.get("model_kind"))


@dataclass(frozen=True)
class CombinedSolution:
    fp_star: float
    op_star: float
    objective: float


def _prefix_argmax(values):
    """Running max and the first index where each running max was reached."""
    pm = np.maximum.accumulate(values)
    new = np.concatenate([[True], values[1:] > pm[:-1]])
    first = np.maximum.accumulate(np.where(new, np.arange(len(values)), 0))
    return pm, first


def solve_combined(curves, cfg):
    n_budget = grid_index(cfg.budget)
    n_budget = min(n_budget, len(curves.li) - 1, len(curves.um) - 1)
    if n_budget <= 0:
        return CombinedSolution(0.0, 0.0, float(curves.li[0] + curves.um[0]))
    li = curves.li[: n_budget + 1]
    pm, first = _prefix_argmax(curves.um[: n_budget + 1])
    i = np.arange(n_budget + 1)
    objective = li + pm[n_budget - i]
    best = int(np.argmax(objective))
    j = int(first[n_budget - best])
    return CombinedSolution(
        fp_star=round(best * config.GRID_STEP, 6),
        op_star=round(j * config.GRID_STEP, 6),
        objective=float(objective[best]),
    )


def evaluate_untouched_model(history, test_vms, target_op, min_history=None):
    """Achieved OP% and memory-weighted UM% of the quantile model on held-out VMs."""
    if not test_vms:
        return 0.0, 0.0
    need = required_history(target_op) if min_history is None else min_history
    over = 0
    claimed = 0.0
    total = 0.0
    for vm in test_vms:
        pred = predict_untouched(history, vm.customer_id, target_op, min_history=need)
        if vm.ground_truth.untouched_fraction < pred:
            over += 1
        claimed += pred * vm.memory_gb
        total += vm.memory_gb
    return 100.0 * over / len(test_vms), 100.0 * claimed / total


def split_validation(vms):
    """Temporal split: earlier half builds the history, later half is evaluated."""
    vms = sorted(vms, key=lambda vm: (vm.arrival, vm.vm_id))
    half = len(vms) // 2
    train, test = vms[:half], vms[half:]
    history = UntouchedHistory(window_s=float("inf"))
    for vm in train:
        history.add(vm.customer_id, vm.ground_truth.untouched_fraction, vm.arrival + vm.lifetime)
    history.refresh()
    return history, train, test


def untouched_curve(history, test_vms, targets=None):
    """UM(OP) on the grid from a sweep over quantile targets (running maxima)."""
    grid = fp_grid()
    um = np.zeros_like(grid)
    op_target = np.zeros_like(grid)
    for target in targets or config.OP_TARGETS:
        op, claimed = evaluate_untouched_model(history, test_vms, target)
        k = grid_index(op)
        if k < len(grid) and claimed > um[k]:
            um[k] = claimed
            op_target[k] = target
    pm, first = _prefix_argmax(um)
    return pm, op_target[first]


def static_untouched_curve(test_vms, fractions=None):
    """Strawman: the same fixed untouched fraction for every VM."""
    grid = fp_grid()
    um = np.zeros_like(grid)
    u = np.array([vm.ground_truth.untouched_fraction for vm in test_vms])
    for frac in fractions or config.STATIC_FRACTIONS:
        op = 100.0 * float((u < frac).mean()) if len(u) else 0.0
        k = grid_index(op)
        if k < len(grid):
            um[k] = max(um[k], 100.0 * frac)
    return np.maximum.accumulate(um)


def estimate_tradeoff_curves(validation, pdm, scenario=None, model_kind=FOREST, seed=0):
    scenario = scenario or config.DEFAULT_SCENARIO
    if len(validation) < config.MIN_CALIBRATION_SAMPLES:
        raise CalibrationError(f"need >= {config.MIN_CALIBRATION_SAMPLES} validation VMs, got {len(validation)}")
    X = feature_matrix(validation, seed=seed)
    y = sensitivity_labels(validation, scenario, pdm)
    model = make_model(model_kind)
    cuts, fp, li = model.calibrate(X, y, pdm, scenario=scenario, seed=seed)
    grid = fp_grid()
    k = np.searchsorted(fp, grid + 1e-9, side="right") - 1
    li_curve = np.maximum.accumulate(li[np.clip(k, 0, len(li) - 1)])

    history, _, test = split_validation(validation)
    um_curve, op_target = untouched_curve(history, test)
    curves = TradeoffCurves(grid=grid, li=li_curve, um=um_curve, op_target=op_target,
                            scenario=scenario, pdm=pdm, model_kind=model_kind)
    logger.info(f"Curves [{scenario}, PDM={pdm}]: LI(2%)={curves.li_at(2):.1f}% UM(4%)={curves.um_at(4):.1f}%")
    return curves, model


# ---------------------------------------------------------
# MODEL SNAPSHOT
# ---------------------------------------------------------
@dataclass
class ModelSnapshot:
    pdm: float
    models: dict = field(default_factory=dict)      # scenario -> SensitivityModel
    curves: dict = field(default_factory=dict)      # scenario -> TradeoffCurves
    history: UntouchedHistory = field(default_factory=UntouchedHistory)

    def model_for(self, scenario):
        if scenario not in self.models:
            raise ModelStateError(f"no sensitivity model calibrated for scenario '{scenario}'")
        return self.models[scenario]

    def curves_for(self, scenario):
        if scenario not in self.curves:
            raise ModelStateError(f"no tradeoff curves for scenario '{scenario}'")
        return self.curves[scenario]


def calibrate_models(validation, pdm, scenarios=None, model_kind=FOREST, seed=0):
    """Sensitivity models and curves per scenario, plus the validation history
    re-timed so that its last observation sits at t=0 (a warm start for a run)."""
    snap = ModelSnapshot(pdm=pdm)
    if validation:
        end = max(vm.departure for vm in validation)
        for vm in sorted(validation, key=lambda vm: vm.departure):
            snap.history.add(vm.customer_id, vm.ground_truth.untouched_fraction, vm.departure - end)
        snap.history.refresh(now=0)
    for scenario in scenarios or sorted(config.LATENCY_SCENARIOS):
        curves, model = estimate_tradeoff_curves(validation, pdm, scenario=scenario, model_kind=model_kind, seed=seed)
        snap.models[scenario] = model
        snap.curves[scenario] = curves
    return snap


def _load_model(d):
    if d.get("kind") == THRESHOLD:
        return ThresholdModel.from_dict(d)
    if d.get("kind") == FOREST:
        return StumpForest.from_dict(d)
    raise SchemaError(f"unknown model kind {d.get('kind')!r}", field="kind")


def save_snapshot(snap, path):
    doc = {
        "format": "pondsim-model",
        "version": config.MODEL_SNAPSHOT_VERSION,
        "pdm": snap.pdm,
        "models": {s: m.to_dict() for s, m in sorted(snap.models.items())},
        "curves": {s: c.to_dict() for s, c in sorted(snap.curves.items())},
        "history": snap.history.to_dict(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    os.replace(tmp, path)
    logger.info(f"Wrote model snapshot {path}")


def load_snapshot(path):
    if not os.path.exists(path):
        raise MissingFileError(f"model snapshot not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"model snapshot is not valid JSON: {e}", line=e.lineno)
    if doc.get("format") != "pondsim-model":
        raise SchemaError("not a pondsim model snapshot", field="format")
    if doc.get("version") != config.MODEL_SNAPSHOT_VERSION:
        raise SchemaError(f"unsupported snapshot version {doc.get('version')}", field="version")
    return ModelSnapshot(
        pdm=doc["pdm"],
        models={s: _load_model(m) for s, m in doc.get("models", {}).items()},
        curves={s: TradeoffCurves.from_dict(c) for s, c in doc.get("curves", {}).items()},
        history=UntouchedHistory.from_dict(doc.get("history", {})),
    )
