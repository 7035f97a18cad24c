"""
motion.py

Ground-truth axial motion of the retina (ILM and RPE layers) and the eye
phantom the observation channel samples.

Depth convention: +z points deeper into the eye in the robot frame, so the
ILM sits at a smaller z than the RPE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from app.artifacts import Provenance, read_csv, write_csv
from app.exceptions import ValidationError

DEFAULT_BASELINE_ILM_MM = 2.2
DEFAULT_RETINA_THICKNESS_MM = 0.25
TRACE_COLUMNS = ("t_s", "ilm_mm", "rpe_mm")

# jitter draws are indexed on millisecond bins of t
_JITTER_BINS_PER_S = 1000


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValidationError(f"{name} must be finite, got {value!r}")


def _require_fraction(name: str, value: float) -> None:
    if not 0.0 <= value < 1.0:
        raise ValidationError(f"{name} must lie in [0, 1), got {value}")


# --------------------------------------------------  ground truth
def bpm_to_hz(rate_bpm: float) -> float:
    """Breaths per minute to Hertz."""
    _require_finite(rate_bpm=rate_bpm)
    if rate_bpm <= 0:
        raise ValidationError(f"rate_bpm must be > 0, got {rate_bpm}")
    return rate_bpm / 60.0


# --------------------------------------------------  Profiles
@dataclass(frozen=True, slots=True)
class DisturbanceSpec:
    """Non-periodic content layered on the sinusoid; all zeros gives a pure sine."""

    drift_rate: float = 0.0        # mm/s, slope of the triangular baseline wander
    am_depth: float = 0.0
    fm_depth: float = 0.0
    harmonic2_frac: float = 0.0
    noise_sd: float = 0.0          # mm
    seed: int = 0
    drift_span: float = 0.05       # mm, half-range of the baseline wander
    am_rate_hz: float = 0.013
    fm_rate_hz: float = 0.007

    def __post_init__(self) -> None:
        _require_finite(drift_rate=self.drift_rate, noise_sd=self.noise_sd,
                        drift_span=self.drift_span, am_rate_hz=self.am_rate_hz,
                        fm_rate_hz=self.fm_rate_hz)
        for name in ("am_depth", "fm_depth", "harmonic2_frac"):
            _require_fraction(name, getattr(self, name))
        for name in ("drift_rate", "drift_span", "noise_sd"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("am_rate_hz", "fm_rate_hz"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")

    @classmethod
    def mild(cls, seed: int = 0) -> "DisturbanceSpec":
        """Default biological stand-in: 10 % AM plus 2 µm/s baseline wander."""
        return cls(drift_rate=0.002, am_depth=0.1, seed=seed)


@dataclass(frozen=True, slots=True)
class MotionProfile:
    amplitude: float                                   # mm, half peak-to-peak
    rate_bpm: float
    phase0: float = 0.0
    baseline_ilm: float = DEFAULT_BASELINE_ILM_MM
    retina_thickness: float = DEFAULT_RETINA_THICKNESS_MM
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    deformation: float = 0.0                           # mm, ILM shift after puncture

    def __post_init__(self) -> None:
        _require_finite(amplitude=self.amplitude, rate_bpm=self.rate_bpm,
                        phase0=self.phase0, baseline_ilm=self.baseline_ilm,
                        retina_thickness=self.retina_thickness,
                        deformation=self.deformation)
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.rate_bpm <= 0:
            raise ValidationError(f"rate_bpm must be > 0, got {self.rate_bpm}")
        if self.retina_thickness <= 0:
            raise ValidationError("retina_thickness must be > 0")
        if not 0.0 <= self.deformation < self.retina_thickness:
            raise ValidationError("deformation must lie in [0, retina_thickness)")

    @property
    def frequency_hz(self) -> float:
        return bpm_to_hz(self.rate_bpm)


# --------------------------------------------------  Continuous model
def _drift(d: DisturbanceSpec, t: np.ndarray) -> np.ndarray:
    if d.drift_rate == 0.0 or d.drift_span == 0.0:
        return np.zeros_like(t)
    u = t * d.drift_rate / d.drift_span
    return d.drift_span * (np.abs(np.mod(u + 1.0, 4.0) - 2.0) - 1.0)


def _jitter(d: DisturbanceSpec, t: np.ndarray) -> np.ndarray:
    if d.noise_sd == 0.0:
        return np.zeros_like(t)
    bins = np.rint(t * _JITTER_BINS_PER_S).astype(np.int64)
    draws = np.array(
        [np.random.default_rng([d.seed, int(b)]).standard_normal() for b in bins]
    )
    return d.noise_sd * draws.reshape(t.shape)


def _ilm_z(profile: MotionProfile, t: np.ndarray) -> np.ndarray:
    d = profile.disturbance
    f0 = profile.frequency_hz
    theta = 2.0 * np.pi * f0 * t + profile.phase0
    if d.fm_depth:
        theta = theta + f0 * d.fm_depth * (1.0 - np.cos(2.0 * np.pi * d.fm_rate_hz * t)) / d.fm_rate_hz
    envelope = profile.amplitude * (1.0 + d.am_depth * np.sin(2.0 * np.pi * d.am_rate_hz * t))
    z = profile.baseline_ilm + envelope * np.sin(theta)
    if d.harmonic2_frac:
        z = z + profile.amplitude * d.harmonic2_frac * np.sin(2.0 * theta)
    return z + _drift(d, t) + _jitter(d, t)


def ground_truth_at(profile: MotionProfile, t: float) -> tuple[float, float]:
    """Return (ilm_z, rpe_z) in mm at time t."""
    _require_finite(t=t)
    if t < 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    ilm = float(_ilm_z(profile, np.array([t], dtype=float))[0])
    return ilm, ilm + profile.retina_thickness


def sample_layers(profile: MotionProfile, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ground_truth_at over an array of times."""
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValidationError("sample times must be finite and >= 0")
    ilm = _ilm_z(profile, t)
    return ilm, ilm + profile.retina_thickness


# --------------------------------------------------  Traces
@dataclass(frozen=True, slots=True, eq=False)
class MotionTrace:
    t: np.ndarray
    ilm_z: np.ndarray
    rpe_z: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.t) == len(self.ilm_z) == len(self.rpe_z)):
            raise ValidationError("trace columns must have equal length")

    def __len__(self) -> int:
        return len(self.t)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(dict(zip(TRACE_COLUMNS, (self.t, self.ilm_z, self.rpe_z))))


def generate_trace(profile: MotionProfile, duration: float, rate_hz: float) -> MotionTrace:
    """Sample the continuous model on a uniform grid starting at t = 0."""
    _require_finite(duration=duration, rate_hz=rate_hz)
    if duration <= 0 or rate_hz <= 0:
        raise ValidationError("duration and rate_hz must be > 0")
    n = math.floor(duration * rate_hz + 1e-9) + 1
    t = np.arange(n, dtype=float) / rate_hz
    ilm, rpe = sample_layers(profile, t)
    return MotionTrace(t=t, ilm_z=ilm, rpe_z=rpe)


def save_trace(trace: MotionTrace, path: Path | str, prov: Provenance) -> Path:
    return write_csv(trace.to_frame(), path, prov)


def load_trace(path: Path | str) -> tuple[MotionTrace, Provenance]:
    df, prov = read_csv(path)
    missing = set(TRACE_COLUMNS) - set(df.columns)
    if missing:
        raise ValidationError(f"{path} lacks trace columns {sorted(missing)}")
    trace = MotionTrace(*(df[c].to_numpy(dtype=float) for c in TRACE_COLUMNS))
    return trace, prov


# --------------------------------------------------  Phantom
@dataclass
class EyePhantom:
    """
    The simulated eye the procedure works on. Once the needle tip passes the
    undeformed ILM the layer latches `profile.deformation` mm deeper.
    """

    profile: MotionProfile
    punctured_at: float | None = None

    def layers_at(self, t: float, needle_z: float | None = None) -> tuple[float, float]:
        ilm, rpe = ground_truth_at(self.profile, t)
        if self.punctured_at is None and needle_z is not None and needle_z > ilm:
            self.punctured_at = t
        if self.punctured_at is not None:
            ilm += self.profile.deformation
        return ilm, rpe

    def layers_seen(self, t_image: float) -> tuple[float, float]:
        """Layers as they stood at t_image; never latches a puncture."""
        ilm, rpe = ground_truth_at(self.profile, t_image)
        if self.punctured_at is not None and t_image >= self.punctured_at:
            ilm += self.profile.deformation
        return ilm, rpe

    def reset(self) -> None:
        self.punctured_at = None
