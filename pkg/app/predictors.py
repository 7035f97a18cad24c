from __future__ import annotations

import numpy as np

from app.exceptions import PredictorError, ValidationError
from app.lstm import WINDOW, LstmModel, SequenceWindow, lstm_forward, lstm_predict_batch, make_windows
from app.observation import SAMPLE_RATE_HZ
from app.sine_fit import FFT_PAD, fft_fit, sine_predict


# ───────────────────────────── Base Class ─────────────────────────────
class Predictor:
    """One-step-ahead ILM predictor: a window of mm values in, next value out."""

    name = "predictor"
    window = WINDOW

    def predict(self, window: SequenceWindow) -> float:  # pragma: no cover
        raise NotImplementedError

    def predict_many(self, windows: np.ndarray, t_last: np.ndarray) -> np.ndarray:
        return np.array([self.predict(SequenceWindow(w, float(t))) for w, t in zip(windows, t_last)])

    def __repr__(self) -> str:  # pragma: no cover
        return f"<{self.name}>"


# ─────────────────────────── Implementations ──────────────────────────
class LstmPredictor(Predictor):
    name = "lstm"
    __slots__ = ("model",)

    def __init__(self, model: LstmModel):
        self.model = model
        self.window = model.window

    def predict(self, window: SequenceWindow) -> float:
        return lstm_forward(self.model, window)

    def predict_many(self, windows: np.ndarray, t_last: np.ndarray) -> np.ndarray:
        return lstm_predict_batch(self.model, windows)


class SinePredictor(Predictor):
    name = "fft"
    __slots__ = ("rate_hz", "pad")

    def __init__(self, rate_hz: float = SAMPLE_RATE_HZ, pad: int = FFT_PAD):
        self.rate_hz = rate_hz
        self.pad = pad

    def predict(self, window: SequenceWindow) -> float:
        fit = fft_fit(window, self.rate_hz, self.pad)
        return sine_predict(fit, window.t_last + 1.0 / self.rate_hz)


class HoldPredictor(Predictor):
    """Last-value hold; the no-prediction ablation."""

    name = "hold"

    def predict(self, window: SequenceWindow) -> float:
        return float(window.values[-1])


# ───────────────────────────── Factory ────────────────────────────────
PREDICTOR_NAMES = ("lstm", "fft", "hold")


def get_predictor(
    name: str,
    model: LstmModel | None = None,
    rate_hz: float = SAMPLE_RATE_HZ,
    pad: int = FFT_PAD,
) -> Predictor:
    key = name.lower()
    if key == "lstm":
        if model is None:
            raise PredictorError("The lstm predictor needs a trained model")
        return LstmPredictor(model)
    if key == "fft":
        return SinePredictor(rate_hz, pad)
    if key == "hold":
        return HoldPredictor()
    raise PredictorError(f"Unknown predictor '{name}'")


def rolling_predictions(
    predictor: Predictor, t: np.ndarray, series: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    One-step predictions over a uniformly sampled series. Returns the indices
    of the predicted samples and the predictions for them.
    """
    t = np.asarray(t, dtype=float)
    series = np.asarray(series, dtype=float)
    if len(t) != len(series):
        raise ValidationError("t and series must have equal length")
    X, _ = make_windows(series, predictor.window)
    if len(X) == 0:
        raise ValidationError(f"series needs more than {predictor.window} samples")
    targets = np.arange(predictor.window, len(series))
    return targets, predictor.predict_many(X, t[targets - 1])
