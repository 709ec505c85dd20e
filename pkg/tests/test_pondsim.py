import json

import pandas as pd
import pytest
import yaml

import pondsim
import vm_trace
from errors import SchemaError, error_line


@pytest.fixture(scope="module")
def trace_file(tmp_path_factory, small_trace):
    path = tmp_path_factory.mktemp("trace") / "trace.csv"
    vm_trace.write_trace(small_trace, path)
    return str(path)


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_error_line_format():
    assert error_line(SchemaError("bad row", line=3)) == 'error=SchemaError code=4 message="bad row (line 3)"'


# ---------------------------------------------------------
# gen-trace
# ---------------------------------------------------------
def test_gen_trace_from_config(tmp_path):
    cfg = tmp_path / "trace.yaml"
    cfg.write_text("n_vms: 200\nvms_per_customer: 20\nrng_seed: 5\n")
    out = tmp_path / "t.csv"
    assert pondsim.main(["gen-trace", "--config", str(cfg), "--out", str(out)]) == 0
    trace = vm_trace.read_trace(out)
    assert len(trace) == 200
    assert trace == vm_trace.generate_trace(vm_trace.TraceGenConfig(n_vms=200, vms_per_customer=20, rng_seed=5))


def test_gen_trace_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "trace.yaml"
    cfg.write_text("n_vms: 10\nflavour: spicy\n")
    assert pondsim.main(["gen-trace", "--config", str(cfg), "--out", str(tmp_path / "t.csv")]) == 2
    assert _err(capsys).startswith("error=ConfigError code=2")
    assert not (tmp_path / "t.csv").exists()


def test_missing_config_file(tmp_path, capsys):
    assert pondsim.main(["gen-trace", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "t.csv")]) == 3
    assert _err(capsys).startswith("error=MissingFileError code=3")


def test_invalid_yaml_reports_line(tmp_path, capsys):
    cfg = tmp_path / "trace.yaml"
    cfg.write_text("n_vms: 10\nvm_types: [unclosed\n")
    assert pondsim.main(["gen-trace", "--config", str(cfg), "--out", str(tmp_path / "t.csv")]) == 4
    assert "line" in _err(capsys)


# ---------------------------------------------------------
# calibrate
# ---------------------------------------------------------
def test_calibrate_writes_snapshot_and_curves(tmp_path, trace_file):
    out = tmp_path / "models.json"
    rc = pondsim.main(["calibrate", "--trace", trace_file, "--pdm", "5", "--model", "dram_bound_threshold",
                       "--scenarios", "182", "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["format"] == "pondsim-model" and doc["pdm"] == pytest.approx(0.05)
    curves = pd.read_csv(tmp_path / "models_curves.csv")
    assert list(curves.columns) == ["rate_pct", "li_182", "um_182", "op_target_182", "um_static"]
    assert len(curves) == 1001
    assert curves["li_182"].is_monotonic_increasing


def test_calibrate_unknown_model(tmp_path, trace_file, capsys):
    rc = pondsim.main(["calibrate", "--trace", trace_file, "--model", "svm", "--out", str(tmp_path / "m.json")])
    assert rc == 2


# ---------------------------------------------------------
# run
# ---------------------------------------------------------
def test_run_writes_metrics_and_events(tmp_path, trace_file):
    out = tmp_path / "run"
    rc = pondsim.main(["run", "--trace", trace_file, "--policy", "static:0.2", "--seed", "3",
                       "--out", str(out), "--event-log"])
    assert rc == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["run"]["policy"] == "static:0.2" and doc["run"]["seed"] == 3
    assert len(doc["rows"]) == 1
    first = json.loads((out / "events.jsonl").read_text().splitlines()[0])
    assert first["event"] == "schedule"
    assert sorted(p.name for p in out.iterdir()) == ["events.jsonl", "metrics.csv", "metrics.json"]


def test_run_from_config_file(tmp_path, trace_file):
    out = tmp_path / "run"
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"trace": trace_file, "policy": "all_local", "out": str(out),
                                   "cluster": {"n_servers": 64, "servers_per_cluster": 64}}))
    assert pondsim.main(["run", "--config", str(cfg)]) == 0
    row = json.loads((out / "metrics.json").read_text())["rows"][0]
    assert row["policy"] == "all_local" and row["dram_savings_pct"] == 0.0


@pytest.mark.parametrize("argv,code", [
    (["--policy", "pond:pdm=99"], 2),
    (["--policy", "static:0.1", "--cluster", "/nonexistent.yaml"], 3),
    (["--policy", "static:0.1", "--scenario", "300"], 2),
])
def test_run_errors_leave_no_output(tmp_path, trace_file, capsys, argv, code):
    out = tmp_path / "run"
    assert pondsim.main(["run", "--trace", trace_file, "--out", str(out)] + argv) == code
    assert _err(capsys).startswith("error=")
    assert not out.exists()


def test_run_without_trace(tmp_path, capsys):
    assert pondsim.main(["run", "--out", str(tmp_path / "r")]) == 2


def test_run_missing_trace(tmp_path, capsys):
    assert pondsim.main(["run", "--trace", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r")]) == 3


# ---------------------------------------------------------
# sweep / report
# ---------------------------------------------------------
def test_sweep_then_report(tmp_path, trace_file):
    sweep = tmp_path / "sweep"
    rc = pondsim.main(["sweep", "--trace", trace_file, "--sizes", "8,16", "--policy", "static:0.2",
                       "--policy", "all_local", "--out", str(sweep)])
    assert rc == 0
    rows = json.loads((sweep / "sweep.json").read_text())["rows"]
    assert sorted((r["policy"], r["pool_sockets"]) for r in rows) == [
        ("all_local", 8), ("all_local", 16), ("static:0.2", 8), ("static:0.2", 16)]

    report = tmp_path / "report"
    assert pondsim.main(["report", "--in", str(sweep), "--out", str(report)]) == 0
    savings = pd.read_csv(report / "savings_by_pool_size.csv")
    assert list(savings.columns) == ["pool_sockets", "all_local", "static:0.2"]
    assert savings["pool_sockets"].tolist() == [8, 16]
    assert (savings["all_local"] == 0).all()
    strand = pd.read_csv(report / "stranding.csv")
    assert {"policy", "bucket_pct", "stranded_pct"} <= set(strand.columns)
    assert len(pd.read_csv(report / "summary.csv")) == 4


def test_sweep_bad_sizes(tmp_path, trace_file):
    assert pondsim.main(["sweep", "--trace", trace_file, "--sizes", "8,x", "--out", str(tmp_path / "s")]) == 2


def test_report_without_metrics(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    assert pondsim.main(["report", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out")]) == 3


def test_defaults_is_yaml(capsys):
    assert pondsim.main(["defaults"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert {"trace", "cluster", "run", "policies", "latency_scenarios"} <= set(doc)
    assert doc["cluster"]["pool_sockets"] == 16
