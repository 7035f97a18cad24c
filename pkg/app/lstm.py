"""
lstm.py

Single-layer LSTM with a fully connected head for one-step-ahead ILM
prediction, written on NumPy: forward pass, backpropagation through time,
Adam, training loop and model files.

Gate order in the stacked weights is input, forget, cell, output.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from app import __version__
from app.exceptions import PredictorError, TrainingError, ValidationError

logger = logging.getLogger("subretinal.lstm")

WINDOW = 20
MODEL_FORMAT_VERSION = 1
PARAM_NAMES = ("W", "U", "b", "fc_w", "fc_b")


# --------------------------------------------------  Types
@dataclass(frozen=True, slots=True, eq=False)
class SequenceWindow:
    values: np.ndarray     # oldest first, mm
    t_last: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or len(values) == 0:
            raise ValidationError("window values must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(values)) or not math.isfinite(self.t_last):
            raise ValidationError("window values and t_last must be finite")


@dataclass(frozen=True, slots=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256          # 0 means full batch
    stride: int = 1
    window: int = WINDOW
    hidden_size: int = 32
    train_fraction: float = 0.8
    seed: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValidationError("epochs must be > 0")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValidationError("learning_rate must be finite and > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("Adam betas must lie in [0, 1) and eps > 0")
        if self.batch_size < 0 or self.stride < 1 or self.window < 1 or self.hidden_size < 1:
            raise ValidationError("batch_size >= 0, stride >= 1, window >= 1, hidden_size >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValidationError("train_fraction must lie in (0, 1]")


@dataclass(slots=True, eq=False)
class LstmModel:
    hidden_size: int
    W: np.ndarray          # (4H, 1)
    U: np.ndarray          # (4H, H)
    b: np.ndarray          # (4H,)
    fc_w: np.ndarray       # (H,)
    fc_b: np.ndarray       # (1,)
    mean: float = 0.0
    scale: float = 1.0
    window: int = WINDOW
    seed: int = 0
    digest: str = ""
    val_mse: float = float("nan")
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        h = self.hidden_size
        expected = {"W": (4 * h, 1), "U": (4 * h, h), "b": (4 * h,), "fc_w": (h,), "fc_b": (1,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} holds non-finite values")
        if not (math.isfinite(self.mean) and math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("normalization stats must be finite with scale > 0")

    @classmethod
    def initialize(cls, hidden_size: int, seed: int = 0, window: int = WINDOW) -> "LstmModel":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) for every parameter."""
        rng = np.random.default_rng(seed)
        k = 1.0 / math.sqrt(hidden_size)
        h = hidden_size
        return cls(
            hidden_size=h,
            W=rng.uniform(-k, k, (4 * h, 1)),
            U=rng.uniform(-k, k, (4 * h, h)),
            b=rng.uniform(-k, k, 4 * h),
            fc_w=rng.uniform(-k, k, h),
            fc_b=rng.uniform(-k, k, 1),
            window=window,
            seed=seed,
        )

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def normalize(self, z: np.ndarray | float) -> np.ndarray | float:
        return (z - self.mean) / self.scale

    def denormalize(self, y: np.ndarray | float) -> np.ndarray | float:
        return y * self.scale + self.mean


# --------------------------------------------------  Forward / backward
def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(model: LstmModel, X: np.ndarray) -> tuple[np.ndarray, list[tuple]]:
    """X: (N, T) normalized inputs. Returns normalized outputs (N,) and the cache."""
    n, steps = X.shape
    h_size = model.hidden_size
    h = np.zeros((n, h_size))
    c = np.zeros((n, h_size))
    cache = []
    for t in range(steps):
        x_t = X[:, t:t + 1]
        z = x_t @ model.W.T + h @ model.U.T + model.b
        i = _sigmoid(z[:, :h_size])
        f = _sigmoid(z[:, h_size:2 * h_size])
        g = np.tanh(z[:, 2 * h_size:3 * h_size])
        o = _sigmoid(z[:, 3 * h_size:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        cache.append((x_t, h_prev, c_prev, i, f, g, o, tanh_c))
    y = h @ model.fc_w + model.fc_b[0]
    return y, cache + [h]


def lstm_loss_and_grads(
    model: LstmModel, X: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss on normalized data and its analytic gradient by BPTT."""
    pred, cache = _forward(model, X)
    h_last = cache.pop()
    n = X.shape[0]
    h_size = model.hidden_size
    resid = pred - y
    loss = float(np.mean(resid * resid))
    dy = 2.0 * resid / n

    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    grads["fc_w"] = h_last.T @ dy
    grads["fc_b"] = np.array([dy.sum()])
    dh = np.outer(dy, model.fc_w)
    dc = np.zeros_like(dh)
    for x_t, h_prev, c_prev, i, f, g, o, tanh_c in reversed(cache):
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.empty((n, 4 * h_size))
        dz[:, :h_size] = di * i * (1.0 - i)
        dz[:, h_size:2 * h_size] = df * f * (1.0 - f)
        dz[:, 2 * h_size:3 * h_size] = dg * (1.0 - g * g)
        dz[:, 3 * h_size:] = do * o * (1.0 - o)
        grads["W"] += dz.T @ x_t
        grads["U"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        dh = dz @ model.U
        dc = dc * f
    return loss, grads


def lstm_forward(model: LstmModel, window: SequenceWindow) -> float:
    """Predicted ILM z (mm) one sample after the window."""
    if len(window.values) != model.window:
        raise ValidationError(f"window holds {len(window.values)} values, model expects {model.window}")
    X = np.asarray(model.normalize(window.values), dtype=float)[None, :]
    y, _ = _forward(model, X)
    return float(model.denormalize(y[0]))


def lstm_predict_batch(model: LstmModel, windows: np.ndarray) -> np.ndarray:
    """Vectorized lstm_forward over an (N, window) array of mm values."""
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 2 or windows.shape[1] != model.window:
        raise ValidationError(f"expected (N, {model.window}) windows, got {windows.shape}")
    if not np.all(np.isfinite(windows)):
        raise ValidationError("windows hold non-finite values")
    y, _ = _forward(model, np.asarray(model.normalize(windows)))
    return np.asarray(model.denormalize(y))


# --------------------------------------------------  Optimizer
class Adam:
    """Adam with bias correction over a dict of parameter arrays, updated in place."""

    def __init__(self, lr: float = 0.005, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            p -= step_size * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)


# --------------------------------------------------  Training
def make_windows(series: np.ndarray, window: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All (window -> next value) pairs of a series, oldest first."""
    series = np.asarray(series, dtype=float)
    if len(series) <= window:
        return np.empty((0, window)), np.empty(0)
    idx = np.arange(0, len(series) - window, stride)
    X = np.stack([series[i:i + window] for i in idx])
    return X, series[idx + window]


def _split(series_list: Sequence[np.ndarray], cfg: TrainConfig) -> tuple[np.ndarray, ...]:
    train_X, train_y, val_X, val_y = [], [], [], []
    for series in series_list:
        X, y = make_windows(series, cfg.window, cfg.stride)
        cut = len(X) if cfg.train_fraction >= 1.0 else int(round(len(X) * cfg.train_fraction))
        train_X.append(X[:cut])
        train_y.append(y[:cut])
        val_X.append(X[cut:])
        val_y.append(y[cut:])
    return (np.concatenate(train_X), np.concatenate(train_y),
            np.concatenate(val_X), np.concatenate(val_y))


def lstm_train(series_list: Sequence[np.ndarray], cfg: TrainConfig, digest: str = "") -> LstmModel:
    """
    Fit an LSTM to one or more ILM series (mm). Windows are split
    chronologically per series; normalization uses training-window statistics.
    """
    usable = [np.asarray(s, dtype=float) for s in series_list if len(s) > cfg.window + 1]
    if not usable:
        raise TrainingError(f"need at least one series longer than {cfg.window + 1} samples")
    if any(not np.all(np.isfinite(s)) for s in usable):
        raise TrainingError("training series hold non-finite values")

    X, y, val_X, val_y = _split(usable, cfg)
    if len(X) == 0:
        raise TrainingError("no training windows after the train/validation split")

    mean = float(X.mean())
    std = float(X.std())
    scale = std if std > 1e-12 else 1.0
    model = replace(LstmModel.initialize(cfg.hidden_size, cfg.seed, cfg.window),
                    mean=mean, scale=scale, digest=digest)
    Xn, yn = (X - mean) / scale, (y - mean) / scale

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    params = model.params
    batch = len(Xn) if cfg.batch_size == 0 else min(cfg.batch_size, len(Xn))
    logger.info("training LSTM: %d windows, hidden=%d, epochs=%d, batch=%d",
                len(Xn), cfg.hidden_size, cfg.epochs, batch)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(Xn)) if batch < len(Xn) else np.arange(len(Xn))
        total = 0.0
        for start in range(0, len(order), batch):
            sel = order[start:start + batch]
            loss, grads = lstm_loss_and_grads(model, Xn[sel], yn[sel])
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} (loss={loss})")
            opt.step(params, grads)
            total += loss * len(sel)
        epoch_loss = total / len(Xn)
        model.loss_history.append(epoch_loss)
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info("epoch %d/%d  train MSE %.6g", epoch, cfg.epochs, epoch_loss)

    if len(val_X):
        pred = lstm_predict_batch(model, val_X)
        model.val_mse = float(np.mean(((pred - val_y) / scale) ** 2))
        logger.info("validation MSE %.6g (normalized)", model.val_mse)
    return model


# --------------------------------------------------  Model files
def save_model(model: LstmModel, path: Path | str) -> Path:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "version": __version__,
        "hidden_size": model.hidden_size,
        "window": model.window,
        "mean": model.mean,
        "scale": model.scale,
        "seed": model.seed,
        "digest": model.digest,
        "val_mse": model.val_mse,
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **model.params)
    return target


def load_model(path: Path | str) -> LstmModel:
    target = Path(path)
    if not target.exists():
        raise PredictorError(f"Model file {target} not found")
    try:
        with np.load(target, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            arrays = {name: data[name].astype(float) for name in PARAM_NAMES}
    except (OSError, KeyError, ValueError) as exc:
        raise PredictorError(f"Cannot read model {target}: {exc}") from exc
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise PredictorError(f"Unsupported model format {meta.get('format_version')!r}")
    if meta.get("version") != __version__:
        logger.warning("model %s was saved by version %s, running %s",
                       target.name, meta.get("version"), __version__)
    return LstmModel(
        hidden_size=int(meta["hidden_size"]),
        mean=float(meta["mean"]),
        scale=float(meta["scale"]),
        window=int(meta["window"]),
        seed=int(meta["seed"]),
        digest=str(meta["digest"]),
        val_mse=float(meta["val_mse"]),
        **arrays,
    )
