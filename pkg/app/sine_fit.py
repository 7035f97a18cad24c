"""
sine_fit.py

FFT sine-wave baseline: find the dominant frequency of a short window in a
zero-padded spectrum, then fit amplitude, phase and offset by least squares
and extrapolate the fitted sine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from app.exceptions import ValidationError
from app.lstm import SequenceWindow

FFT_PAD = 256
SEARCH_BINS = 16
MAX_STARTS = 4


@dataclass(frozen=True, slots=True)
class SineFit:
    amplitude: float
    frequency: float       # Hz
    phase: float           # rad, referenced to absolute t = 0
    offset: float

    def __post_init__(self) -> None:
        if self.amplitude < 0 or self.frequency < 0:
            raise ValidationError("SineFit amplitude and frequency must be >= 0")


def sine_predict(fit: SineFit, t_next: float) -> float:
    return fit.offset + fit.amplitude * math.sin(2.0 * math.pi * fit.frequency * t_next + fit.phase)


def _peak_frequency(centered: np.ndarray, rate_hz: float, n_fft: int) -> tuple[int, float]:
    """Dominant non-DC bin and its parabolic-interpolated frequency."""
    spectrum = np.abs(np.fft.rfft(centered, n_fft))
    k = 1 + int(np.argmax(spectrum[1:]))
    delta = 0.0
    if k + 1 < len(spectrum):
        a, b, c = spectrum[k - 1], spectrum[k], spectrum[k + 1]
        denom = a - 2.0 * b + c
        if denom != 0.0:
            delta = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    return k, (k + delta) * rate_hz / n_fft


def _basis(freqs: np.ndarray, tau: np.ndarray) -> np.ndarray:
    arg = 2.0 * np.pi * freqs[:, None] * tau[None, :]
    return np.stack([np.sin(arg), np.cos(arg), np.ones_like(arg)], axis=-1)


def _profile_residuals(freqs: np.ndarray, tau: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares (sin, cos, offset) at each fixed frequency and the residual norms."""
    A = _basis(freqs, tau)
    coef = np.linalg.pinv(A) @ x
    resid = x[None, :] - np.einsum("fnk,fk->fn", A, coef)
    return np.sum(resid * resid, axis=1), coef


def _starts(rss: np.ndarray) -> list[int]:
    """Indices of local minima of the residual curve, lowest first."""
    minima = [
        i for i in range(len(rss))
        if (i == 0 or rss[i] <= rss[i - 1]) and (i == len(rss) - 1 or rss[i] <= rss[i + 1])
    ]
    return sorted(minima, key=lambda i: rss[i])[:MAX_STARTS]


def fft_fit(
    window: SequenceWindow,
    rate_hz: float,
    pad: int = FFT_PAD,
    search_bins: int = SEARCH_BINS,
) -> SineFit:
    """
    Fit a sine to the window.

    The dominant frequency comes from the zero-padded spectrum with parabolic
    peak interpolation. Padded bins up to `search_bins` past the peak are then
    scored by the least-squares residual of a fixed-frequency fit, and the best
    local minima are polished by bounded nonlinear least squares within one bin.
    """
    if not (math.isfinite(rate_hz) and rate_hz > 0):
        raise ValidationError(f"rate_hz must be finite and > 0, got {rate_hz}")
    x = window.values
    n = len(x)
    offset = float(np.mean(x))
    if np.ptp(x) <= 1e-12 * max(1.0, abs(offset)):
        return SineFit(0.0, 0.0, 0.0, offset)

    n_fft = max(pad, n)
    bin_hz = rate_hz / n_fft
    k_peak, f_peak = _peak_frequency(x - offset, rate_hz, n_fft)
    tau = np.arange(n, dtype=float) / rate_hz
    t_first = window.t_last - (n - 1) / rate_hz

    k_hi = min(n_fft // 2, k_peak + search_bins)
    freqs = np.append(np.arange(1, k_hi + 1) * bin_hz, f_peak)
    rss, coef = _profile_residuals(freqs, tau, x)

    def residual(p: np.ndarray) -> np.ndarray:
        s, c, f, off = p
        arg = 2.0 * np.pi * f * tau
        return s * np.sin(arg) + c * np.cos(arg) + off - x

    best = None
    for i in _starts(rss):
        f0 = freqs[i]
        lo, hi = max(f0 - bin_hz, 0.0), f0 + bin_hz
        x0 = np.array([coef[i][0], coef[i][1], f0, coef[i][2]])
        sol = least_squares(residual, x0, bounds=([-np.inf, -np.inf, lo, -np.inf],
                                                  [np.inf, np.inf, hi, np.inf]),
                            method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or sol.cost < best.cost:
            best = sol

    # the window mean is biased by any partial cycle; the fitted offset is not
    s, c, f, off = best.x
    amplitude = math.hypot(s, c)
    phase = math.atan2(c, s) - 2.0 * math.pi * f * t_first
    return SineFit(amplitude, float(f), math.remainder(phase, 2.0 * math.pi), float(off))
