"""Prediction and tracking error metrics, reported in micrometres."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.exceptions import ValidationError

UM_PER_MM = 1000.0


@dataclass(frozen=True, slots=True, eq=False)
class PredictionReport:
    rmse: float            # µm
    max_ae: float          # µm
    mean_ae: float         # µm
    n: int
    residuals: np.ndarray  # µm, prediction - truth

    def as_row(self) -> dict[str, float]:
        return {"rmse_um": self.rmse, "maxae_um": self.max_ae, "mean_um": self.mean_ae, "n": self.n}


def evaluate(predictions, truths) -> PredictionReport:
    """RMSE / MaxAE / mean absolute error of mm-valued predictions against truths."""
    pred = np.asarray(predictions, dtype=float).ravel()
    true = np.asarray(truths, dtype=float).ravel()
    if pred.size == 0 or pred.size != true.size:
        raise ValidationError(f"need equal non-zero lengths, got {pred.size} and {true.size}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(true))):
        raise ValidationError("predictions and truths must be finite")
    resid = (pred - true) * UM_PER_MM
    abs_resid = np.abs(resid)
    return PredictionReport(
        rmse=float(np.sqrt(np.mean(resid * resid))),
        max_ae=float(abs_resid.max()),
        mean_ae=float(abs_resid.mean()),
        n=int(pred.size),
        residuals=resid,
    )
