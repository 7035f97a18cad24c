import json
import logging
import time

import numpy as np
import pytest

from app import __version__
from app.exceptions import PredictorError, TrainingError, ValidationError
from app.lstm import (
    Adam,
    LstmModel,
    SequenceWindow,
    TrainConfig,
    load_model,
    lstm_forward,
    lstm_loss_and_grads,
    lstm_predict_batch,
    lstm_train,
    make_windows,
    save_model,
)


def _numeric_grads(model, X, y, eps=1e-5):
    grads = {}
    for name, arr in model.params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + eps
            up, _ = lstm_loss_and_grads(model, X, y)
            flat[k] = saved - eps
            down, _ = lstm_loss_and_grads(model, X, y)
            flat[k] = saved
            gflat[k] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


# -----------------------------------------------------------------------------
# Gradients
# -----------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(100))
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = LstmModel.initialize(hidden_size=4, seed=seed, window=3)
    X = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    _, analytic = lstm_loss_and_grads(model, X, y)
    numeric = _numeric_grads(model, X, y)
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-10)
        assert np.linalg.norm(a - n) / denom < 1e-4, name


# -----------------------------------------------------------------------------
# Adam
# -----------------------------------------------------------------------------
def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(params, {"w": np.array([3.0, -0.5])})
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(params, {"w": 2 * params["w"]})
    assert abs(params["w"][0]) < 5e-2


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------
def test_initialize_shapes_and_range():
    model = LstmModel.initialize(hidden_size=8, seed=1)
    assert model.U.shape == (32, 8)
    bound = 1 / np.sqrt(8)
    assert all(np.all(np.abs(p) <= bound) for p in model.params.values())


def test_bad_shapes_rejected():
    model = LstmModel.initialize(hidden_size=4)
    with pytest.raises(ValidationError):
        LstmModel(4, model.W, model.U[:, :3], model.b, model.fc_w, model.fc_b)


def test_forward_checks_window_length():
    model = LstmModel.initialize(hidden_size=4, window=20)
    with pytest.raises(ValidationError):
        lstm_forward(model, SequenceWindow(np.ones(19), 4.75))


def test_window_rejects_non_finite():
    with pytest.raises(ValidationError):
        SequenceWindow(np.array([1.0, np.nan]), 0.0)


def test_batch_equals_single_forward():
    model = LstmModel.initialize(hidden_size=6, seed=3, window=5)
    windows = np.random.default_rng(0).normal(2.2, 0.1, size=(4, 5))
    batch = lstm_predict_batch(model, windows)
    singles = [lstm_forward(model, SequenceWindow(w, 1.0)) for w in windows]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_make_windows():
    X, y = make_windows(np.arange(10.0), window=3, stride=2)
    assert X.tolist()[0] == [0.0, 1.0, 2.0]
    assert y.tolist() == [3.0, 5.0, 7.0, 9.0]
    X, y = make_windows(np.arange(3.0), window=3)
    assert X.shape == (0, 3) and y.shape == (0,)


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------
def test_constant_series_is_learned():
    cfg = TrainConfig(epochs=500, hidden_size=8, window=5, batch_size=0)
    model = lstm_train([np.full(60, 5.0)], cfg)
    pred = lstm_forward(model, SequenceWindow(np.full(5, 5.0), 0.0))
    assert abs(pred - 5.0) < 1e-3 * 5.0


def test_training_reduces_loss_on_sine():
    t = np.arange(400) / 4
    series = 2.2 + 0.1 * np.sin(2 * np.pi * (8 / 60) * t)
    model = lstm_train([series], TrainConfig(epochs=60, hidden_size=8, window=20, batch_size=64))
    assert model.loss_history[-1] < model.loss_history[0]
    assert np.isfinite(model.val_mse)


def test_training_is_deterministic():
    series = [2.2 + 0.05 * np.sin(np.arange(80) / 3)]
    cfg = TrainConfig(epochs=5, hidden_size=4, window=10, batch_size=16, seed=9)
    a, b = lstm_train(series, cfg), lstm_train(series, cfg)
    np.testing.assert_array_equal(a.U, b.U)


def test_too_short_series_raises():
    with pytest.raises(TrainingError):
        lstm_train([np.ones(10)], TrainConfig(window=20))


def test_non_finite_series_raises():
    series = np.ones(50)
    series[7] = np.nan
    with pytest.raises(TrainingError):
        lstm_train([series], TrainConfig(window=5))


@pytest.mark.parametrize(
    "kwargs", [{"epochs": 0}, {"learning_rate": 0.0}, {"beta1": 1.0}, {"stride": 0}, {"train_fraction": 0.0}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


# -----------------------------------------------------------------------------
# Files
# -----------------------------------------------------------------------------
def test_save_and_load_model(tmp_path):
    model = LstmModel.initialize(hidden_size=4, seed=2, window=6)
    model.digest = "abc"
    path = save_model(model, tmp_path / "models" / "m.npz")
    loaded = load_model(path)
    assert loaded.digest == "abc" and loaded.window == 6
    window = SequenceWindow(np.linspace(2.1, 2.3, 6), 1.5)
    assert lstm_forward(loaded, window) == lstm_forward(model, window)


def test_model_file_records_version(tmp_path, caplog):
    path = save_model(LstmModel.initialize(hidden_size=4, seed=2, window=6), tmp_path / "m.npz")
    with np.load(path) as data:
        arrays = {name: data[name] for name in data.files}
    meta = json.loads(str(arrays["meta"]))
    assert meta["version"] == __version__

    meta["version"] = "0.0.1"
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with caplog.at_level(logging.WARNING, logger="subretinal.lstm"):
        load_model(path)
    assert "0.0.1" in caplog.text


def test_load_missing_or_corrupt_model(tmp_path):
    with pytest.raises(PredictorError):
        load_model(tmp_path / "none.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(PredictorError):
        load_model(bad)


def test_forward_latency():
    model = LstmModel.initialize(hidden_size=32, seed=0)
    window = SequenceWindow(np.full(20, 2.2), 5.0)
    lstm_forward(model, window)
    timings = []
    for _ in range(50):
        start = time.perf_counter()
        lstm_forward(model, window)
        timings.append(time.perf_counter() - start)
    assert np.median(timings) < 0.010
