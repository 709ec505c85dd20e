import logging

import pytest

import config
from logs import LOGGER_NAME
from predictors import ModelSnapshot, ThresholdModel, UntouchedHistory, calibrate_models, fp_grid
from vm_trace import TraceGenConfig, VmRequest, WorkloadGroundTruth, generate_trace


@pytest.fixture(autouse=True)
def _logs_to_tmp(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "LOG_DIR", str(tmp_path / "logs"))
    yield
    root = logging.getLogger(LOGGER_NAME)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()


@pytest.fixture
def make_vm():
    def _make(vm_id=0, customer="c00000", arrival=0, lifetime=100, cores=2, memory_gb=10,
              untouched=0.5, slowdown=0.1, exponent=1.0, server_hint=0, dram_bound=None):
        gt = WorkloadGroundTruth(untouched, {s: slowdown for s in config.LATENCY_SCENARIOS}, exponent)
        d = slowdown if dram_bound is None else dram_bound
        return VmRequest(vm_id, customer, "D4", arrival, lifetime, cores, memory_gb, server_hint, gt,
                         dram_bound=min(1.0, d), memory_bound=min(1.0, d + 0.1))
    return _make


@pytest.fixture
def fixed_snapshot():
    """Snapshot whose predictions are set by hand: constant history, always/never insensitive."""
    def _make(customer="c00000", untouched=0.37, insensitive=False, n_obs=200, pdm=0.05):
        history = UntouchedHistory()
        history.add_batch(customer, [untouched] * n_obs, t=0)
        model = ThresholdModel()
        model.pdm = pdm
        model.scenario = config.DEFAULT_SCENARIO
        model.cut_by_grid = fp_grid() * 0 + (2.0 if insensitive else 0.0)
        return ModelSnapshot(pdm=pdm, models={config.DEFAULT_SCENARIO: model}, history=history)
    return _make


@pytest.fixture(scope="session")
def small_trace():
    cfg = TraceGenConfig(n_vms=1500, servers_per_cluster=64, vms_per_customer=50, rng_seed=7)
    return generate_trace(cfg)


@pytest.fixture(scope="session")
def trace_10k():
    return generate_trace(TraceGenConfig(n_vms=10_000))


@pytest.fixture(scope="session")
def small_snapshot(small_trace):
    return calibrate_models(small_trace, 0.05, scenarios=[config.DEFAULT_SCENARIO], model_kind="dram_bound_threshold")
