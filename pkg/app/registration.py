"""
registration.py

Needle registration: IQR outlier removal plus median over the stationary
needle observations, and the 1-D pixel-to-robot affine map

    Z = sign * b * p + (z_init - sign * b * p_init)

With sign = -1 this reads Z = -b p + (z_init + b p_init).
The sign is the only place the image/robot axis orientation lives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.exceptions import ValidationError

logger = logging.getLogger("subretinal.registration")

IQR_FENCE = 1.5
REGISTRATION_WINDOW = 15
DEFAULT_SLOPE_SIGN = -1
RECORD_COLUMNS = ("b_mm_per_px", "p_init_px", "z_init_mm", "n_rejected")


@dataclass(frozen=True, slots=True)
class FilteredPosition:
    value_px: float
    n_used: int
    n_rejected: int


@dataclass(frozen=True, slots=True)
class RegistrationTransform:
    b: float               # mm per pixel
    p_init: float          # px
    z_init: float          # mm
    sign: int = DEFAULT_SLOPE_SIGN

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.b, self.p_init, self.z_init)):
            raise ValidationError("registration parameters must be finite")
        if self.b <= 0:
            raise ValidationError(f"b must be > 0, got {self.b}")
        if self.sign not in (1, -1):
            raise ValidationError("sign must be +1 or -1")


# --------------------------------------------------  Temporal filtering
def iqr_fences(samples: Sequence[float], k: float = IQR_FENCE) -> tuple[float, float]:
    q1, q3 = np.percentile(np.asarray(samples, dtype=float), [25.0, 75.0])
    iqr = q3 - q1
    return float(q1 - k * iqr), float(q3 + k * iqr)


def iqr_filter(samples: Sequence[float], k: float = IQR_FENCE) -> FilteredPosition:
    """Drop values outside [Q1 - k·IQR, Q3 + k·IQR] and take the median of the rest."""
    values = np.asarray(samples, dtype=float)
    if values.size < 4:
        raise ValidationError(f"iqr_filter needs at least 4 samples, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("iqr_filter samples must be finite")
    lo, hi = iqr_fences(values, k)
    keep = values[(values >= lo) & (values <= hi)]
    rejected = values.size - keep.size
    if rejected:
        logger.info("IQR fence [%.1f, %.1f] rejected %d of %d samples", lo, hi, rejected, values.size)
    return FilteredPosition(float(np.median(keep)), int(keep.size), int(rejected))


# --------------------------------------------------  registration map
def build_registration(
    p_filtered: float, robot_z_now: float, b: float, sign: int = DEFAULT_SLOPE_SIGN
) -> RegistrationTransform:
    tf = RegistrationTransform(b=b, p_init=p_filtered, z_init=robot_z_now, sign=sign)
    logger.info("registration b=%.6g mm/px p_init=%.2f px z_init=%.4f mm sign=%+d",
                b, p_filtered, robot_z_now, sign)
    return tf


def apply_registration(tf: RegistrationTransform, p: float) -> float:
    """Robot-frame depth (mm) of pixel row p."""
    return tf.z_init + tf.sign * tf.b * (p - tf.p_init)


def inverse(tf: RegistrationTransform, z: float) -> float:
    """Pixel row of robot-frame depth z."""
    return tf.p_init + (z - tf.z_init) / (tf.sign * tf.b)


def registration_record(tf: RegistrationTransform, filtered: FilteredPosition) -> dict[str, float]:
    return dict(zip(RECORD_COLUMNS, (tf.b, tf.p_init, tf.z_init, filtered.n_rejected)))
