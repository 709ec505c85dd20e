import numpy as np
import pytest

import config
from errors import CalibrationError, ConfigError, MissingFileError, ModelStateError, SchemaError
from predictors import (FOREST, THRESHOLD, CombinedConfig, SensitivityFeatures, StumpForest,
                        ThresholdModel, TradeoffCurves, UntouchedHistory, calibrate_models,
                        classify_latency_insensitive, estimate_tradeoff_curves, fp_grid,
                        load_snapshot, predict_untouched, save_snapshot, solve_combined)


# ---------------------------------------------------------
# untouched-memory quantile model
# ---------------------------------------------------------
def test_no_history_predicts_zero():
    assert predict_untouched(UntouchedHistory(), "c1", 5) == 0.0


def test_constant_history():
    h = UntouchedHistory()
    h.add_batch("c1", [0.5, 0.5, 0.5])
    for op in (0.5, 5, 50):
        assert predict_untouched(h, "c1", op) == 0.5


def test_uniform_history_quantile():
    h = UntouchedHistory()
    h.add_batch("c1", np.random.default_rng(3).random(100))
    assert predict_untouched(h, "c1", 5) == pytest.approx(0.05, abs=0.03)


def test_prediction_never_exceeds_history_max():
    rng = np.random.default_rng(4)
    for i in range(200):
        h = UntouchedHistory()
        obs = rng.random(int(rng.integers(1, 40)))
        h.add_batch("c", obs)
        assert predict_untouched(h, "c", float(rng.uniform(0.1, 50))) <= obs.max()


def test_degenerate_inputs_return_zero():
    h = UntouchedHistory()
    h.add_batch("c1", [0.4] * 10)
    assert predict_untouched(h, "c1", 0) == 0.0
    assert predict_untouched(h, "c1", 5, min_history=20) == 0.0


def test_history_window_and_summaries():
    h = UntouchedHistory()
    h.add("c1", 0.9, t=0)
    h.add("c1", 0.1, t=8 * 86400)
    h.refresh(now=8 * 86400)
    assert h.observations("c1").tolist() == [0.1]
    assert set(h.summaries["c1"]) == set(config.HISTORY_PERCENTILES)


def test_predictions_read_the_frozen_view():
    h = UntouchedHistory()
    h.add_batch("c1", [0.3] * 5)
    h.add("c1", 0.0, t=1)
    assert predict_untouched(h, "c1", 10) == 0.3
    h.refresh()
    assert predict_untouched(h, "c1", 10) < 0.3


# ---------------------------------------------------------
# latency-insensitivity models
# ---------------------------------------------------------
def _linear_set(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 0.2, n)
    X = np.column_stack([d, np.clip(d + 0.1, 0, 1), rng.random(n)])
    return X, 3 * d > 0.05


def test_threshold_closed_form():
    X, y = _linear_set()
    m = ThresholdModel()
    m.calibrate(X, y, 0.05)
    theta = m.threshold(0)
    assert theta == pytest.approx(0.05 / 3, abs=0.001)
    assert not y[X[:, 0] < theta].any()


def test_zero_dram_bound_is_insensitive():
    X, y = _linear_set()
    m = ThresholdModel()
    m.calibrate(X, y, 0.05)
    assert classify_latency_insensitive(SensitivityFeatures(0.0, 0.1), 0.05, 2.0, m)


def test_uncalibrated_models_raise():
    f = SensitivityFeatures(0.1, 0.2)
    for m in (ThresholdModel(), StumpForest()):
        with pytest.raises(ModelStateError):
            classify_latency_insensitive(f, 0.05, 2.0, m)


def test_pdm_mismatch_raises():
    X, y = _linear_set()
    m = ThresholdModel()
    m.calibrate(X, y, 0.05)
    with pytest.raises(ModelStateError):
        classify_latency_insensitive(SensitivityFeatures(0.0, 0.1), 0.10, 2.0, m)


def test_forest_needs_sixteen_stumps():
    with pytest.raises(ConfigError):
        StumpForest(n_stumps=8)


def test_too_few_samples():
    X, y = _linear_set(n=50)
    with pytest.raises(CalibrationError):
        ThresholdModel().calibrate(X, y, 0.05)


@pytest.mark.parametrize("kind", [ThresholdModel, StumpForest])
def test_held_out_fp_guarantee_on_linear_set(kind):
    X, y = _linear_set(n=6000, seed=1)
    Xt, yt = _linear_set(n=6000, seed=2)
    m = kind()
    m.calibrate(X, y, 0.05)
    for target in (1.0, 2.0, 5.0):
        pred = m.predict_insensitive(Xt, target)
        fp = 100.0 * (pred & yt).sum() / len(yt)
        assert fp <= target + 1.0


def test_forest_ignores_noise_channel():
    X, y = _linear_set(n=3000)
    m = StumpForest()
    m.fit(X, y, seed=0)
    assert all(s.feature in (0, 1) for s in m.stumps)


def test_forest_votes_are_soft():
    X, y = _linear_set(n=3000)
    m = StumpForest()
    m.fit(X, y, seed=0)
    risk = m.risk(X)
    # hard votes could only give n_stumps + 1 distinct values
    assert np.unique(risk).size > len(m.stumps) + 1


# ---------------------------------------------------------
# tradeoff curves
# ---------------------------------------------------------
def test_curves_need_enough_samples(make_vm):
    vms = [make_vm(vm_id=i, arrival=i) for i in range(50)]
    with pytest.raises(CalibrationError):
        estimate_tradeoff_curves(vms, 0.05)


def test_everything_insensitive(make_vm):
    vms = [make_vm(vm_id=i, arrival=i, slowdown=0.01, customer=f"c{i % 3}") for i in range(300)]
    curves, _ = estimate_tradeoff_curves(vms, 0.05, model_kind=THRESHOLD)
    assert curves.li[0] == 100.0


def test_all_memory_touched(make_vm):
    vms = [make_vm(vm_id=i, arrival=i, untouched=0.0, customer=f"c{i % 2}") for i in range(300)]
    curves, _ = estimate_tradeoff_curves(vms, 0.05, model_kind=THRESHOLD)
    assert (curves.um == 0).all()


def test_curves_are_monotone(small_trace):
    curves, _ = estimate_tradeoff_curves(small_trace, 0.05, model_kind=THRESHOLD)
    assert (np.diff(curves.li) >= 0).all() and (np.diff(curves.um) >= 0).all()
    assert curves.li[-1] == 100.0


def test_non_monotone_curves_rejected():
    g = fp_grid()
    with pytest.raises(ConfigError):
        TradeoffCurves(grid=g, li=g[::-1], um=g)


# ---------------------------------------------------------
# combined optimizer
# ---------------------------------------------------------
def _curves(li, um):
    return TradeoffCurves(grid=fp_grid(), li=li, um=um)


def _brute_force(li, um, budget_steps):
    n = budget_steps + 1
    total = np.add.outer(li[:n], um[:n])
    i, j = np.indices(total.shape)
    return total[i + j <= budget_steps].max()


def test_zero_budget():
    g = fp_grid()
    sol = solve_combined(_curves(g, 2 * g), CombinedConfig(pdm=0.05, tp=100))
    assert (sol.fp_star, sol.op_star) == (0.0, 0.0)
    assert sol.objective == 0.0


def test_linear_curves():
    g = fp_grid()
    sol = solve_combined(_curves(g, 2 * g), CombinedConfig(pdm=0.05, tp=98))
    assert sol.fp_star == 0.0
    assert sol.op_star == pytest.approx(2.0)
    assert sol.objective == pytest.approx(4.0)


def test_matches_brute_force_on_random_curves():
    rng = np.random.default_rng(99)
    n = len(fp_grid())
    for _ in range(1000):
        steps = rng.random((2, n)) * (rng.random((2, n)) < 0.05)
        li = np.minimum(100.0, np.cumsum(steps[0]) * rng.uniform(1, 30))
        um = np.minimum(100.0, np.cumsum(steps[1]) * rng.uniform(1, 30))
        tp = float(rng.choice([99.9, 99.0, 98.0, 95.0, 90.0, 60.0, 99.95, 98.04, 97.55, 90.01]))
        cfg = CombinedConfig(pdm=0.05, tp=tp)
        sol = solve_combined(_curves(li, um), cfg)
        # budget in hundredths of a point, floored to the 0.1 grid
        budget_steps = (10_000 - round(tp * 100)) // 10
        assert sol.fp_star + sol.op_star <= 100 - tp + 1e-9
        assert sol.objective == _brute_force(li, um, budget_steps)
        c = _curves(li, um)
        assert c.li_at(sol.fp_star) + c.um_at(sol.op_star) == sol.objective


@pytest.mark.parametrize("tp,steps", [(98.04, 19), (99.95, 0), (97.99, 20), (98.0, 20)])
def test_budget_between_grid_points_rounds_down(tp, steps):
    g = fp_grid()
    sol = solve_combined(_curves(g, 2 * g), CombinedConfig(pdm=0.05, tp=tp))
    assert sol.fp_star + sol.op_star <= 100 - tp + 1e-9
    assert sol.op_star == pytest.approx(steps * 0.1)


def test_ties_prefer_smaller_fp_then_op():
    g = fp_grid()
    flat = np.full_like(g, 10.0)
    sol = solve_combined(_curves(flat, flat), CombinedConfig(pdm=0.05, tp=95))
    assert (sol.fp_star, sol.op_star) == (0.0, 0.0)


def test_bigger_budget_never_hurts():
    rng = np.random.default_rng(5)
    n = len(fp_grid())
    li = np.minimum(100, np.cumsum(rng.random(n) * 0.3))
    um = np.minimum(100, np.cumsum(rng.random(n) * 0.2))
    c = _curves(li, um)
    objectives = [solve_combined(c, CombinedConfig(pdm=0.05, tp=tp)).objective for tp in (100, 99.5, 99, 98, 95, 90)]
    assert objectives == sorted(objectives)


@pytest.mark.parametrize("pdm,tp", [(0, 98), (0.3, 98), (0.05, 50), (0.05, 101)])
def test_combined_config_validation(pdm, tp):
    with pytest.raises(ConfigError):
        CombinedConfig(pdm=pdm, tp=tp)


# ---------------------------------------------------------
# snapshot
# ---------------------------------------------------------
def test_snapshot_round_trip(tmp_path, small_trace):
    snap = calibrate_models(small_trace, 0.05, scenarios=["182"], model_kind=FOREST)
    snap.history.add_batch("c00001", [0.2, 0.4, 0.6])
    path = tmp_path / "models.json"
    save_snapshot(snap, str(path))
    back = load_snapshot(str(path))
    m0, m1 = snap.model_for("182"), back.model_for("182")
    X = np.random.default_rng(0).random((200, 3)) * 0.3
    for fp in (0.0, 2.0, 10.0):
        assert (m0.predict_insensitive(X, fp) == m1.predict_insensitive(X, fp)).all()
    assert np.allclose(back.curves_for("182").um, snap.curves_for("182").um, atol=1e-6)
    assert predict_untouched(back.history, "c00001", 50) == pytest.approx(predict_untouched(snap.history, "c00001", 50), abs=1e-6)
    with pytest.raises(ModelStateError):
        back.model_for("222")


def test_snapshot_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_snapshot(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "pondsim-model", "version": 999}')
    with pytest.raises(SchemaError):
        load_snapshot(str(bad))
