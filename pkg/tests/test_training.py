import csv
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msmamba import autodiff as ad
from msmamba import training
from msmamba.data import TimeSeriesDataset, chronological_split, standardize, window
from msmamba.errors import ConfigError, NumericError
from msmamba.model import ForecastModel, ModelConfig
from msmamba.training import (
    AdamState,
    RunHistory,
    TrainConfig,
    adam_step,
    derive_seed,
    epoch_order,
    evaluate,
    log_scale_trajectory,
    predict,
    train,
)


def toy_dataset(length=160, variates=2, seed=0):
    t = np.arange(length)[:, None]
    r = np.random.default_rng(seed)
    values = np.sin(2 * np.pi * t / np.array([8.0, 13.0])[:variates]) + 0.1 * r.normal(size=(length, variates))
    ds = TimeSeriesDataset(values=values, names=tuple(f"v{j}" for j in range(variates)))
    return standardize(chronological_split(ds))


def toy_model(strategy="fixed", seed=0, **kw):
    config = ModelConfig(lookback=8, horizon=4, n_variates=2, d_model=4, n_scales=2, d_state=2, strategy=strategy, **kw)
    return ForecastModel.init(config, seed)


# --- config / seeds -------------------------------------------------------


@pytest.mark.parametrize(
    "kw", [dict(lr=0.0), dict(batch_size=0), dict(max_epochs=0), dict(patience=-1), dict(beta1=1.0), dict(clip_norm=0.0), dict(max_steps=0)]
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_search_ranges_flag():
    assert TrainConfig(lr=1e-4, batch_size=32).in_search_ranges()
    assert not TrainConfig(lr=1e-2, batch_size=32).in_search_ranges()
    assert not TrainConfig(lr=1e-4, batch_size=48).in_search_ranges()


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert len({derive_seed(s, p) for s in range(5) for p in ("init", "train", "shuffle")}) == 15
    assert 0 <= derive_seed(123, "x") < 2**63


def test_epoch_order_is_a_keyed_permutation():
    a = epoch_order(3, 0, 50)
    assert sorted(a) == list(range(50))
    np.testing.assert_array_equal(a, epoch_order(3, 0, 50))
    assert not np.array_equal(a, epoch_order(3, 1, 50))


# --- Adam -----------------------------------------------------------------


def params_of(*arrays):
    return {f"p{i}": ad.Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}


def test_adam_zero_gradient_leaves_parameters(rng):
    params = params_of(rng.normal(size=(3, 2)), rng.normal(size=4))
    before = {k: p.data.copy() for k, p in params.items()}
    state = adam_step(params, {k: np.zeros_like(p.data) for k, p in params.items()}, AdamState(), TrainConfig(lr=1e-3))
    assert state.step == 1
    for k, p in params.items():
        np.testing.assert_array_equal(p.data, before[k])


@given(seed=st.integers(0, 10_000), lr=st.floats(1e-5, 1e-1))
def test_adam_first_step_bound(seed, lr):
    r = np.random.default_rng(seed)
    params = params_of(r.normal(size=5))
    g = r.normal(size=5) * 10.0 ** r.uniform(-6, 3, size=5)
    before = params["p0"].data.copy()
    adam_step(params, {"p0": g}, AdamState(), TrainConfig(lr=lr))
    move = params["p0"].data - before
    assert np.all(np.abs(move) <= lr * (1 + 1e-6))
    np.testing.assert_array_equal(np.sign(move), -np.sign(g))


def test_adam_constant_gradient_fixed_point():
    g = np.array([3.0, -0.5, 1e-3])
    params, state, cfg = params_of(np.zeros(3)), AdamState(), TrainConfig(lr=1e-2)
    expected = cfg.lr * np.abs(g) / (np.abs(g) + cfg.eps)  # moments are bias-corrected exactly for constant g
    for _ in range(200):
        before = params["p0"].data.copy()
        adam_step(params, {"p0": g}, state, cfg)
        np.testing.assert_allclose(np.abs(params["p0"].data - before), expected, rtol=1e-9)
    np.testing.assert_allclose(params["p0"].data, -200 * np.sign(g) * expected, rtol=1e-9)


def test_adam_is_deterministic(rng):
    init, grads = rng.normal(size=(4, 3)), [rng.normal(size=(4, 3)) for _ in range(10)]
    results = []
    for _ in range(2):
        params, state = params_of(init.copy()), AdamState()
        for g in grads:
            adam_step(params, {"p0": g}, state, TrainConfig(lr=1e-3))
        results.append(params["p0"].data.tobytes())
    assert results[0] == results[1]


def test_adam_non_finite_gradient_names_parameter(rng):
    params = params_of(rng.normal(size=2), rng.normal(size=2))
    with pytest.raises(NumericError, match="p1"):
        adam_step(params, {"p0": np.ones(2), "p1": np.array([1.0, np.inf])}, AdamState(), TrainConfig())


def test_adam_requires_matching_keys(rng):
    params = params_of(rng.normal(size=2), rng.normal(size=2))
    with pytest.raises(ConfigError, match="p1"):
        adam_step(params, {"p0": np.ones(2)}, AdamState(), TrainConfig())


def test_adam_clipping_matches_scaled_gradient(rng):
    g = {"p0": rng.normal(size=3) * 100, "p1": rng.normal(size=2) * 100}
    norm = np.sqrt(sum(np.sum(v * v) for v in g.values()))
    clipped, scaled = params_of(np.zeros(3), np.zeros(2)), params_of(np.zeros(3), np.zeros(2))
    s1, s2 = AdamState(), AdamState()
    for _ in range(3):
        adam_step(clipped, g, s1, TrainConfig(lr=1e-3, clip_norm=1.0))
        adam_step(scaled, {k: v / norm for k, v in g.items()}, s2, TrainConfig(lr=1e-3))
    for k in clipped:
        np.testing.assert_allclose(clipped[k].data, scaled[k].data, rtol=1e-12)


# --- train loop -----------------------------------------------------------


def scripted_evaluate(monkeypatch, values, snapshots):
    sequence = iter(values)

    def fake(model, *args, **kwargs):
        snapshots.append(model.state_dict())
        return {"mse": next(sequence), "mae": 0.0}

    monkeypatch.setattr(training, "evaluate", fake)


def test_patience_zero_stops_at_first_non_improvement(monkeypatch):
    snapshots = []
    scripted_evaluate(monkeypatch, [1.0, 0.5, 0.7, 0.1, 0.05], snapshots)
    model, history = train(toy_model(), toy_dataset(), TrainConfig(lr=1e-3, max_epochs=5, patience=0))
    assert history.val_mse == [1.0, 0.5, 0.7]
    assert history.best_epoch == 1


def test_restores_best_epoch(monkeypatch):
    snapshots = []
    scripted_evaluate(monkeypatch, [0.3, 0.4, 0.5, 0.6], snapshots)
    model, history = train(toy_model(), toy_dataset(), TrainConfig(lr=1e-2, max_epochs=4, patience=5))
    assert len(history.val_mse) == 4 and history.best_epoch == 0
    assert history.best_val == min(history.val_mse)
    final = model.state_dict()
    for name, value in snapshots[0].items():
        np.testing.assert_array_equal(final[name], value)
    assert any(not np.array_equal(snapshots[-1][k], final[k]) for k in final)


def test_returned_model_val_equals_history_minimum():
    ds = toy_dataset()
    model, history = train(toy_model(), ds, TrainConfig(lr=3e-3, max_epochs=3, patience=3, batch_size=16))
    assert history.best_val == min(history.val_mse)
    assert evaluate(model, ds, "val")["mse"] == history.best_val


def test_training_reduces_loss():
    _, history = train(toy_model(), toy_dataset(), TrainConfig(lr=1e-2, max_epochs=4, patience=4, batch_size=8))
    assert history.train_mse[-1] < history.train_mse[0]


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model, history = train(toy_model("learnable", seed=4), toy_dataset(), TrainConfig(lr=1e-2, max_epochs=2, seed=9, batch_size=16))
        runs.append((history.train_mse, history.val_mse, [v.tolist() for v in history.scale_values], model.state_dict()))
    assert runs[0][:3] == runs[1][:3]
    for k in runs[0][3]:
        assert runs[0][3][k].tobytes() == runs[1][3][k].tobytes()


def test_max_steps_caps_training():
    _, history = train(toy_model(), toy_dataset(), TrainConfig(lr=1e-3, max_epochs=5, max_steps=3, batch_size=4))
    assert history.steps == 3 and len(history.val_mse) == 1


def test_variate_mismatch_rejected():
    with pytest.raises(ConfigError, match="D=2"):
        train(toy_model(), toy_dataset(variates=1), TrainConfig())


def test_numeric_abort_propagates(monkeypatch):
    value, _ = ad.UNARY_RULES["exp"]
    monkeypatch.setitem(ad.UNARY_RULES, "exp", (value, lambda x, y: np.full_like(x, np.nan)))
    with pytest.raises(NumericError):
        train(toy_model(), toy_dataset(), TrainConfig(lr=1e-3, max_epochs=1))


# --- evaluation -----------------------------------------------------------


def zero_model():
    model = toy_model()
    model.proj_w.data[:] = 0.0
    model.proj_b.data[:] = 0.0
    return model


def test_perfect_predictions_score_zero(rng):
    model = toy_model()
    ds = toy_dataset()
    batch = window(ds, "test", 8, 4)
    pred = predict(model, batch.inputs, batch_size=5)
    np.testing.assert_array_equal(pred, model(batch.inputs).data)
    from msmamba.data import WindowBatch

    metrics = evaluate(model, ds, "test", windows=WindowBatch(batch.inputs, pred, batch.origins))
    assert metrics == {"mse": 0.0, "mae": 0.0}


def test_predict_zero_mse_is_mean_square_of_targets(rng):
    values = rng.normal(size=(3000, 2))
    ds = standardize(chronological_split(TimeSeriesDataset(values=values, names=("a", "b"))))
    batch = window(ds, "test", 8, 4)
    metrics = evaluate(zero_model(), ds, "test", batch_size=64)
    assert metrics["mse"] == pytest.approx(np.mean(batch.targets**2), rel=1e-12)
    assert metrics["mae"] == pytest.approx(np.mean(np.abs(batch.targets)), rel=1e-12)
    assert metrics["mse"] == pytest.approx(1.0, abs=0.1)


def test_denormalized_metrics_scale_with_std(rng):
    values = rng.normal(size=(600, 2)) * np.array([1.0, 1.0]) * 5.0 + 2.0
    ds = standardize(chronological_split(TimeSeriesDataset(values=values, names=("a", "b"))))
    metrics = evaluate(toy_model(), ds, "val", denormalized=True)
    std = ds.std
    assert metrics["mse_raw"] == pytest.approx(metrics["mse"] * std.mean() ** 2, rel=0.05)
    assert metrics["mae"] ** 2 <= metrics["mse"] and metrics["mae_raw"] ** 2 <= metrics["mse_raw"]


@given(seed=st.integers(0, 1000))
def test_mae_squared_bounded_by_mse(seed):
    model = toy_model(seed=seed)
    metrics = evaluate(model, toy_dataset(seed=seed), "test")
    assert metrics["mae"] ** 2 <= metrics["mse"] * (1 + 1e-12)


# --- persistence ----------------------------------------------------------


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_history_csv(tmp_path):
    history = RunHistory(train_mse=[0.5, 0.25], val_mse=[0.4, 0.3], best_epoch=1)
    history.to_csv(tmp_path / "h.csv")
    rows = read_rows(tmp_path / "h.csv")
    assert rows[0] == ["epoch", "train_mse", "val_mse"]
    assert rows[1:] == [["1", "0.5", "0.4"], ["2", "0.25", "0.3"]]


@pytest.mark.parametrize("interval", [1, 3])
def test_trajectory_rows_follow_interval(tmp_path, interval):
    model, history = train(
        toy_model("learnable", seed=2), toy_dataset(), TrainConfig(lr=1e-2, max_epochs=1, batch_size=8, log_interval=interval)
    )
    assert log_scale_trajectory(history, tmp_path / "s.csv")
    rows = read_rows(tmp_path / "s.csv")
    assert rows[0] == ["step", "scale_1", "scale_2"]
    assert len(rows) - 1 == history.steps // interval
    assert [int(r[0]) for r in rows[1:]] == list(range(interval, history.steps + 1, interval))
    first = [float(v) for v in rows[1][1:]]
    if interval == 1:
        assert all(1.0 <= v <= 4.0 for v in first)


def test_dynamic_trajectory_is_logged(tmp_path):
    _, history = train(toy_model("dynamic"), toy_dataset(), TrainConfig(lr=1e-3, max_epochs=1, batch_size=16))
    assert log_scale_trajectory(history, tmp_path / "s.csv")
    assert len(read_rows(tmp_path / "s.csv")) == history.steps + 1


def test_fixed_strategy_writes_no_trajectory(tmp_path, caplog):
    _, history = train(toy_model("fixed"), toy_dataset(), TrainConfig(lr=1e-3, max_epochs=1, batch_size=16))
    with caplog.at_level(logging.WARNING):
        assert not log_scale_trajectory(history, tmp_path / "s.csv")
    assert not (tmp_path / "s.csv").exists()
    assert "fixed" in caplog.text
