import numpy as np
import pytest

import config
from errors import ConfigError, MissingFileError, SchemaError, ValidationError
from vm_trace import (TraceGenConfig, WorkloadGroundTruth, generate_trace, read_trace, slowdown_at,
                      trace_summary, write_trace)


# ---------------------------------------------------------
# slowdown model
# ---------------------------------------------------------
def test_slowdown_endpoints_and_closed_form():
    gt = WorkloadGroundTruth(0.5, {"182": 0.30, "222": 0.40}, 1.0)
    assert slowdown_at(gt, 0.0, "182") == 0.0
    assert slowdown_at(gt, 1.0, "182") == pytest.approx(0.30)
    assert slowdown_at(gt, 0.5, "182") == pytest.approx(0.15)


def test_slowdown_unknown_scenario():
    gt = WorkloadGroundTruth(0.5, {"182": 0.30}, 1.0)
    with pytest.raises(ConfigError):
        slowdown_at(gt, 0.5, "300")


def test_slowdown_monotone_in_spill():
    rng = np.random.default_rng(0)
    for _ in range(500):
        gt = WorkloadGroundTruth(float(rng.random()), {"182": float(rng.random() * 0.6)},
                                 float(rng.uniform(0.5, 2.0)))
        a, b = np.sort(rng.random(2))
        assert slowdown_at(gt, 0.0, "182") == 0.0
        assert slowdown_at(gt, a, "182") <= slowdown_at(gt, b, "182") + 1e-15


def test_ground_truth_rejects_out_of_range():
    with pytest.raises(ValidationError):
        WorkloadGroundTruth(1.2, {"182": 0.1})
    with pytest.raises(ValidationError):
        WorkloadGroundTruth(0.2, {"182": -0.1})


# ---------------------------------------------------------
# generator
# ---------------------------------------------------------
def test_empty_trace():
    assert generate_trace(TraceGenConfig(n_vms=0)) == []


def test_generation_is_reproducible():
    cfg = TraceGenConfig(n_vms=300, rng_seed=11)
    assert generate_trace(cfg) == generate_trace(TraceGenConfig(n_vms=300, rng_seed=11))
    assert generate_trace(cfg) != generate_trace(TraceGenConfig(n_vms=300, rng_seed=12))


def test_bad_mixture_is_config_error():
    cfg = TraceGenConfig(n_vms=10, slowdown_mixture={"182": (0.5, 0.5, 0.5, 0.0)})
    with pytest.raises(ConfigError):
        generate_trace(cfg)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        TraceGenConfig.from_dict({"n_vms": 10, "bogus": 1})


def test_slowdown_marginals_match_mixture(trace_10k):
    summary = trace_summary(trace_10k)
    for name, weights in config.SLOWDOWN_MIXTURE.items():
        got = summary["slowdown_classes"][name]
        for g, w in zip(got, weights):
            assert abs(g - w) <= 0.02


def test_untouched_median(trace_10k):
    um = np.array([vm.ground_truth.untouched_fraction for vm in trace_10k])
    assert abs(np.median(um) - config.UNTOUCHED_MEDIAN) <= 0.02


def test_customers_are_consistent(trace_10k):
    by_customer = {}
    for vm in trace_10k:
        by_customer.setdefault(vm.customer_id, []).append(vm.ground_truth.untouched_fraction)
    within = np.mean([np.std(v) for v in by_customer.values() if len(v) >= 20])
    overall = np.std([vm.ground_truth.untouched_fraction for vm in trace_10k])
    assert within < overall / 2


def _customer_means(trace, min_vms=15):
    by_customer = {}
    for vm in trace:
        by_customer.setdefault(vm.customer_id, []).append(vm.ground_truth.untouched_fraction)
    return {c: np.mean(v) for c, v in by_customer.items() if len(v) >= min_vms}


def test_customers_shared_across_seeds():
    a = _customer_means(generate_trace(TraceGenConfig(n_vms=3000, vms_per_customer=50, rng_seed=1)))
    b = _customer_means(generate_trace(TraceGenConfig(n_vms=3000, vms_per_customer=50, rng_seed=2)))
    common = sorted(set(a) & set(b))
    assert len(common) >= 20
    assert np.corrcoef([a[c] for c in common], [b[c] for c in common])[0, 1] > 0.8


def test_population_seed_changes_customers():
    a = _customer_means(generate_trace(TraceGenConfig(n_vms=3000, vms_per_customer=50, rng_seed=1)))
    b = _customer_means(generate_trace(TraceGenConfig(n_vms=3000, vms_per_customer=50, rng_seed=1,
                                                      population_seed=99)))
    common = sorted(set(a) & set(b))
    assert abs(np.corrcoef([a[c] for c in common], [b[c] for c in common])[0, 1]) < 0.6


def test_trace_sorted_and_hints_in_range(small_trace):
    arrivals = [vm.arrival for vm in small_trace]
    assert arrivals == sorted(arrivals)
    assert all(vm.server_hint is None or 0 <= vm.server_hint < 64 for vm in small_trace)


def test_hints_respect_capacity(small_trace):
    # replay the placement: no server is ever over-committed
    events = []
    for vm in small_trace:
        if vm.server_hint is not None:
            events.append((vm.arrival, 1, vm))
            events.append((vm.departure, 0, vm))
    events.sort(key=lambda e: (e[0], e[1]))
    cores = np.zeros(64, dtype=int)
    mem = np.zeros(64, dtype=int)
    for _, kind, vm in events:
        sign = 1 if kind == 1 else -1
        cores[vm.server_hint] += sign * vm.cores
        mem[vm.server_hint] += sign * vm.memory_gb
        assert cores.max() <= config.CORES_PER_SERVER
        assert mem.max() <= config.DRAM_GB_PER_SERVER


def test_full_pack_share_is_first_fit():
    packed = generate_trace(TraceGenConfig(n_vms=400, placement_pack_share=1.0, rng_seed=3))
    spread = generate_trace(TraceGenConfig(n_vms=400, placement_pack_share=0.0, rng_seed=3))
    assert packed[0].server_hint == 0
    # the first arrivals fit together on the lowest-id server
    first = packed[:3]
    assert sum(vm.cores for vm in first) <= config.CORES_PER_SERVER
    assert all(vm.server_hint == 0 for vm in first)
    assert len({vm.server_hint for vm in spread[:10]}) > 1


@pytest.mark.parametrize("share", [-0.1, 1.5])
def test_pack_share_out_of_range(share):
    with pytest.raises(ConfigError):
        generate_trace(TraceGenConfig(n_vms=10, placement_pack_share=share))


# ---------------------------------------------------------
# trace files
# ---------------------------------------------------------
def test_canonical_rewrite_is_byte_identical(tmp_path, small_trace):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace(small_trace[:3], a)
    write_trace(read_trace(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_read_back_equals_generated(tmp_path, trace_10k):
    path = tmp_path / "t.csv"
    write_trace(trace_10k, path)
    assert read_trace(path) == trace_10k


def test_missing_file():
    with pytest.raises(MissingFileError):
        read_trace("/nonexistent/trace.csv")


def test_missing_value_names_field_and_line(tmp_path, small_trace):
    path = tmp_path / "t.csv"
    write_trace(small_trace[:3], path)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    row = lines[2].split(",")
    row[header.index("memory_gb")] = ""
    lines[2] = ",".join(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError) as err:
        read_trace(path)
    assert err.value.line == 3
    assert err.value.field == "memory_gb"


def test_missing_column(tmp_path, small_trace):
    path = tmp_path / "t.csv"
    write_trace(small_trace[:3], path)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("cores")
    path.write_text("\n".join(",".join(c for i, c in enumerate(l.split(",")) if i != drop) for l in lines) + "\n")
    with pytest.raises(SchemaError) as err:
        read_trace(path)
    assert err.value.field == "cores"


def test_non_monotone_arrivals(tmp_path, make_vm):
    path = tmp_path / "t.csv"
    write_trace([make_vm(vm_id=0, arrival=5), make_vm(vm_id=1, arrival=10)], path)
    lines = path.read_text().splitlines()
    lines[1], lines[2] = lines[2], lines[1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError):
        read_trace(path)
