"""
observation.py

Stands in for the OCT segmentation output: noisy, quantized, occasionally
spiking pixel rows for ILM, RPE and needle tip at the 4 Hz scan rate, plus the
consumer-side gate the procedure puts in front of its layer streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import pandas as pd

from app.exceptions import ValidationError

logger = logging.getLogger("subretinal.observation")

SAMPLE_RATE_HZ = 4.0
SAMPLE_LOG_COLUMNS = ("t_s", "ilm_px", "rpe_px", "needle_px", "valid_mask")

# RNG channel ids; one independent stream per (seed, t-index, channel)
_CH_ILM, _CH_RPE, _CH_NEEDLE, _CH_DROPOUT = range(4)
_MASK_ILM, _MASK_RPE, _MASK_NEEDLE = 1, 2, 4


@dataclass(frozen=True, slots=True)
class ImagingGeometry:
    image_height_px: int = 1024
    mm_per_px: float = 3.379 / 1024
    window_top_z: float = 0.5      # robot-frame depth of pixel row 0
    depth_sign: int = 1            # +1 when rows grow with robot depth

    def __post_init__(self) -> None:
        if self.image_height_px <= 0:
            raise ValidationError("image_height_px must be > 0")
        if not (math.isfinite(self.mm_per_px) and self.mm_per_px > 0):
            raise ValidationError("mm_per_px must be finite and > 0")
        if not math.isfinite(self.window_top_z):
            raise ValidationError("window_top_z must be finite")
        if self.depth_sign not in (1, -1):
            raise ValidationError("depth_sign must be +1 or -1")

    @property
    def field_depth_mm(self) -> float:
        return self.mm_per_px * self.image_height_px


@dataclass(frozen=True, slots=True)
class ObservationNoise:
    sd_px: float = 3.0
    needle_sd_px: float = 2.0
    outlier_prob: float = 0.01
    outlier_scale_px: float = 50.0
    occlusion_extra_sd_px: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0
    latency_s: float = 0.2         # layer rows show the retina this long before the sample time

    def __post_init__(self) -> None:
        for name in ("outlier_prob", "dropout_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        for name in ("sd_px", "needle_sd_px", "outlier_scale_px", "occlusion_extra_sd_px", "latency_s"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")

    @classmethod
    def ideal(cls) -> "ObservationNoise":
        return cls(sd_px=0.0, needle_sd_px=0.0, outlier_prob=0.0, outlier_scale_px=0.0, latency_s=0.0)


def layer_time(t: float | np.ndarray, noise: ObservationNoise) -> float | np.ndarray:
    """Time of the retina a segmentation result stamped t shows (never before 0)."""
    return np.maximum(np.asarray(t, dtype=float) - noise.latency_s, 0.0)


@dataclass(frozen=True, slots=True)
class DepthSample:
    t: float
    ilm_px: float | None
    rpe_px: float | None
    needle_px: float | None
    is_outlier: bool = False       # diagnostic only; the pipeline never reads it

    @property
    def valid_mask(self) -> int:
        mask = 0
        if self.ilm_px is not None:
            mask |= _MASK_ILM
        if self.rpe_px is not None:
            mask |= _MASK_RPE
        if self.needle_px is not None:
            mask |= _MASK_NEEDLE
        return mask


# --------------------------------------------------  Geometry
def depth_row(z: float, geometry: ImagingGeometry) -> float:
    """Unrounded pixel row of robot-frame depth z."""
    return geometry.depth_sign * (z - geometry.window_top_z) / geometry.mm_per_px


def mm_to_px(z: float, geometry: ImagingGeometry) -> int:
    if not math.isfinite(z):
        raise ValidationError(f"z must be finite, got {z!r}")
    return int(math.floor(depth_row(z, geometry) + 0.5))


def px_to_mm(p: float, geometry: ImagingGeometry) -> float:
    if not math.isfinite(p):
        raise ValidationError(f"p must be finite, got {p!r}")
    return geometry.window_top_z + geometry.depth_sign * p * geometry.mm_per_px


# --------------------------------------------------  Observation model
def _channel(
    z: float,
    sd_px: float,
    geometry: ImagingGeometry,
    noise: ObservationNoise,
    index: int,
    channel: int,
) -> tuple[float | None, bool]:
    exact = depth_row(z, geometry)
    if not 0.0 <= exact < geometry.image_height_px:
        return None, False
    rng = np.random.default_rng([noise.seed, index, channel])
    # fixed draw order keeps streams aligned whatever the parameters
    gauss, u_outlier, u_sign = rng.standard_normal(), rng.random(), rng.random()
    value = exact + sd_px * gauss
    spiked = u_outlier < noise.outlier_prob
    if spiked:
        value += noise.outlier_scale_px if u_sign < 0.5 else -noise.outlier_scale_px
    row = float(np.clip(math.floor(value + 0.5), 0, geometry.image_height_px - 1))
    return row, spiked


def observe(
    layers: tuple[float, float],
    needle_z: float,
    geometry: ImagingGeometry,
    noise: ObservationNoise,
    t: float,
    rate_hz: float = SAMPLE_RATE_HZ,
) -> DepthSample:
    """
    One segmentation result at time t for (ilm_z, rpe_z) and needle depth.
    `layers` are the depths the image shows, i.e. taken at layer_time(t).
    Layer channels pick up the occlusion noise while the tip is below the
    ILM as segmented without it.
    """
    ilm_z, rpe_z = layers
    if not all(math.isfinite(v) for v in (ilm_z, rpe_z, needle_z, t)):
        raise ValidationError("observe needs finite layer depths, needle_z and t")
    index = int(round(t * rate_hz))
    if index < 0:
        raise ValidationError(f"t must be >= 0, got {t}")

    if noise.dropout_prob > 0.0:
        if np.random.default_rng([noise.seed, index, _CH_DROPOUT]).random() < noise.dropout_prob:
            logger.debug("dropout at t=%.2f", t)
            return DepthSample(t, None, None, None)

    ilm_px, ilm_spike = _channel(ilm_z, noise.sd_px, geometry, noise, index, _CH_ILM)
    layer_sd = noise.sd_px
    if (noise.occlusion_extra_sd_px > 0.0 and ilm_px is not None
            and needle_z > px_to_mm(ilm_px, geometry)):
        layer_sd = math.hypot(noise.sd_px, noise.occlusion_extra_sd_px)
        # same draws as above, wider spread
        ilm_px, ilm_spike = _channel(ilm_z, layer_sd, geometry, noise, index, _CH_ILM)
    rpe_px, rpe_spike = _channel(rpe_z, layer_sd, geometry, noise, index, _CH_RPE)
    needle_px, needle_spike = _channel(needle_z, noise.needle_sd_px, geometry, noise, index, _CH_NEEDLE)
    return DepthSample(t, ilm_px, rpe_px, needle_px, ilm_spike or rpe_spike or needle_spike)


def sample_log(samples: Iterable[DepthSample]) -> pd.DataFrame:
    rows = [
        {"t_s": s.t,
         "ilm_px": np.nan if s.ilm_px is None else s.ilm_px,
         "rpe_px": np.nan if s.rpe_px is None else s.rpe_px,
         "needle_px": np.nan if s.needle_px is None else s.needle_px,
         "valid_mask": s.valid_mask}
        for s in samples
    ]
    return pd.DataFrame(rows, columns=list(SAMPLE_LOG_COLUMNS))


def samples_from_log(df: pd.DataFrame) -> list[DepthSample]:
    def _opt(v: float) -> float | None:
        return None if pd.isna(v) else float(v)

    return [
        DepthSample(float(r.t_s), _opt(r.ilm_px), _opt(r.rpe_px), _opt(r.needle_px))
        for r in df.itertuples()
    ]


# --------------------------------------------------  Consumer-side gate
class LayerGate:
    """
    Rejects layer readings that jump further than the layer can physically move
    since the last accepted one. After too many consecutive rejections the gate
    re-anchors on the new reading.
    """

    def __init__(
        self,
        max_jump_mm: float = 0.05,
        max_speed_mm_s: float = 0.2,
        max_consecutive_rejections: int = 3,
    ) -> None:
        self.max_jump_mm = max_jump_mm
        self.max_speed_mm_s = max_speed_mm_s
        self.max_consecutive_rejections = max_consecutive_rejections
        self._last: tuple[float, float] | None = None
        self._rejections = 0

    @property
    def last_valid(self) -> float | None:
        return None if self._last is None else self._last[1]

    def accept(self, t: float, z: float) -> bool:
        if self._last is None or self._rejections >= self.max_consecutive_rejections:
            if self._rejections:
                logger.warning("layer gate re-anchored after %d rejections", self._rejections)
            self._last, self._rejections = (t, z), 0
            return True
        t_prev, z_prev = self._last
        allowance = self.max_jump_mm + self.max_speed_mm_s * max(t - t_prev, 0.0)
        if abs(z - z_prev) > allowance:
            self._rejections += 1
            logger.warning("layer jump %.3f mm > %.3f mm at t=%.2f rejected",
                           abs(z - z_prev), allowance, t)
            return False
        self._last, self._rejections = (t, z), 0
        return True

    def reset(self) -> None:
        self._last, self._rejections = None, 0


def gated_series(
    t: np.ndarray, rows_px: np.ndarray, geometry: ImagingGeometry, gate: LayerGate | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Layer rows (NaN where missing) to a gap-free mm series: gated or missing
    samples hold the last accepted value. Returns the series and the mask of
    accepted samples. Leading gaps take the first accepted value.
    """
    gate = gate or LayerGate()
    values = np.full(len(rows_px), np.nan)
    accepted = np.zeros(len(rows_px), dtype=bool)
    last = np.nan
    for i, (ti, p) in enumerate(zip(t, rows_px)):
        if not np.isnan(p):
            z = px_to_mm(float(p), geometry)
            if gate.accept(float(ti), z):
                last, accepted[i] = z, True
        values[i] = last
    if not accepted.any():
        raise ValidationError("layer never observed")
    first = int(np.argmax(accepted))
    values[:first] = values[first]
    return values, accepted
