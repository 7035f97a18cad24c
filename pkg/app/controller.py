"""
controller.py

Proportional-with-clamp axial velocity law and the single-axis robot it
drives. Targets arrive as value messages at the scan rate; the loop runs at
its own tick rate and holds (or interpolates) the latest target in between.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from app.exceptions import ValidationError
from app.metrics import UM_PER_MM, evaluate
from app.observation import SAMPLE_RATE_HZ

logger = logging.getLogger("subretinal.controller")

TRACE_COLUMNS = ("t_s", "target_mm", "needle_mm", "v_mm_s", "phase")
DEFAULT_RESOLUTION_MM = 0.001
DEFAULT_REPEATABILITY_MM = 0.003
DEFAULT_STALENESS_S = 0.75
METRIC_KEYS = ("offset_um", "rmse_um", "maxae_um", "mean_um", "bias_um", "n")


@dataclass(frozen=True, slots=True)
class ControllerConfig:
    k_v: float = 10.0              # 1/s
    v_max: float = 0.5             # mm/s
    loop_rate_hz: float = 50.0

    def __post_init__(self) -> None:
        for name in ("k_v", "v_max", "loop_rate_hz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be finite and > 0, got {value}")

    @property
    def dt(self) -> float:
        return 1.0 / self.loop_rate_hz


# --------------------------------------------------  velocity law
def compute_velocity(cfg: ControllerConfig, d_current: float, d_target: float) -> float:
    """Signed velocity toward the target: min(k_v·|error|, v_max)."""
    if not (math.isfinite(d_current) and math.isfinite(d_target)):
        raise ValidationError("compute_velocity needs finite depths")
    error = d_target - d_current
    if error == 0.0:
        return 0.0
    return math.copysign(min(cfg.k_v * abs(error), cfg.v_max), error)


# --------------------------------------------------  Plant
@dataclass(frozen=True, slots=True)
class RobotAxis:
    """
    Needle-tip axis. `z_cmd` integrates the commanded velocity; the encoder
    reports it quantized to `resolution`. The physical tip sits `offset` away
    from the reading, re-drawn on every direction reversal.
    """

    z_cmd: float
    resolution: float = DEFAULT_RESOLUTION_MM
    repeatability_sd: float = DEFAULT_REPEATABILITY_MM
    v_cmd: float = 0.0
    offset: float = 0.0
    last_dir: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.z_cmd):
            raise ValidationError("z_cmd must be finite")
        if self.resolution <= 0 or self.repeatability_sd < 0:
            raise ValidationError("resolution must be > 0 and repeatability_sd >= 0")

    @property
    def reading(self) -> float:
        return round(self.z_cmd / self.resolution) * self.resolution

    @property
    def z(self) -> float:
        return self.reading + self.offset


def step_axis(axis: RobotAxis, v: float, dt: float, rng: np.random.Generator | None = None) -> RobotAxis:
    if not dt > 0:
        raise ValidationError(f"dt must be > 0, got {dt}")
    direction = (v > 0) - (v < 0)
    offset = axis.offset
    if direction and axis.last_dir and direction != axis.last_dir and rng is not None:
        offset = float(rng.normal(0.0, axis.repeatability_sd)) if axis.repeatability_sd else 0.0
    return replace(
        axis,
        z_cmd=axis.z_cmd + v * dt,
        v_cmd=v,
        offset=offset,
        last_dir=direction or axis.last_dir,
    )


# --------------------------------------------------  Target stream
@dataclass(frozen=True, slots=True)
class TargetUpdate:
    """Target message: ramps from start_mm at t to end_mm one sample later, then holds."""

    t: float
    start_mm: float
    end_mm: float

    @classmethod
    def hold(cls, t: float, value: float) -> "TargetUpdate":
        return cls(t, value, value)

    def value_at(self, t: float, period: float) -> float:
        if self.start_mm == self.end_mm or t >= self.t + period:
            return self.end_mm
        frac = max(t - self.t, 0.0) / period
        return self.start_mm + frac * (self.end_mm - self.start_mm)


class AxisTracker:
    """Control loop object: feed it target updates, tick it at the loop rate."""

    def __init__(
        self,
        cfg: ControllerConfig,
        axis: RobotAxis,
        rng: np.random.Generator | None = None,
        staleness_s: float = DEFAULT_STALENESS_S,
        sample_period: float = 1.0 / SAMPLE_RATE_HZ,
    ) -> None:
        self.cfg = cfg
        self.axis = axis
        self.rng = rng
        self.staleness_s = staleness_s
        self.sample_period = sample_period
        self._latest: TargetUpdate | None = None
        self.stale = False

    def push(self, update: TargetUpdate) -> None:
        self._latest = update

    def target_at(self, t: float) -> float | None:
        if self._latest is None:
            return None
        return self._latest.value_at(t, self.sample_period)

    def is_stale(self, t: float) -> bool:
        return self._latest is None or t - self._latest.t > self.staleness_s + 1e-9

    def tick(self, t: float) -> float:
        """Command one control period; returns the velocity applied."""
        if self.is_stale(t):
            if not self.stale:
                logger.warning("target stream stale at t=%.2f s, holding axis", t)
            self.stale = True
            return self.hold()
        v = compute_velocity(self.cfg, self.axis.reading, self.target_at(t))
        self.axis = step_axis(self.axis, v, self.cfg.dt, self.rng)
        return v

    def hold(self) -> float:
        self.axis = step_axis(self.axis, 0.0, self.cfg.dt, self.rng)
        return 0.0


# --------------------------------------------------  Metrics
@dataclass(frozen=True, slots=True)
class TrackingMetrics:
    offset_um: float       # nominal distance to the reference layer
    rmse_um: float
    maxae_um: float
    mean_um: float         # mean absolute error
    bias_um: float         # mean signed error, needle deeper is positive
    n: int

    def as_row(self) -> dict[str, float]:
        return {key: getattr(self, key) for key in METRIC_KEYS}


def tracking_metrics(needle_z, target_z, offset_mm: float = 0.0) -> TrackingMetrics:
    report = evaluate(needle_z, target_z)
    return TrackingMetrics(
        offset_um=offset_mm * UM_PER_MM,
        rmse_um=report.rmse,
        maxae_um=report.max_ae,
        mean_um=report.mean_ae,
        bias_um=float(np.mean(report.residuals)),
        n=report.n,
    )


@dataclass(frozen=True, slots=True, eq=False)
class TrackingResult:
    trace: pd.DataFrame
    metrics: TrackingMetrics
    aborted: bool
    axis: RobotAxis


def track(
    cfg: ControllerConfig,
    axis: RobotAxis,
    updates: Iterable[TargetUpdate],
    duration: float,
    truth_fn: Callable[[float], float] | None = None,
    rng: np.random.Generator | None = None,
    staleness_s: float = DEFAULT_STALENESS_S,
    sample_period: float = 1.0 / SAMPLE_RATE_HZ,
) -> TrackingResult:
    """
    Run the loop for `duration` seconds against a time-ordered update stream.
    Errors are taken against `truth_fn(t)` when given, else against the held
    target. A stale stream stops the loop with the axis at rest.
    """
    if not (math.isfinite(duration) and duration > 0):
        raise ValidationError(f"duration must be finite and > 0, got {duration}")
    pending = sorted(updates, key=lambda u: u.t)
    tracker = AxisTracker(cfg, axis, rng, staleness_s, sample_period)
    n_ticks = int(math.floor(duration * cfg.loop_rate_hz + 1e-9))
    rows: list[tuple] = []
    needle, reference = [], []
    cursor = 0
    for i in range(n_ticks):
        t = i / cfg.loop_rate_hz
        while cursor < len(pending) and pending[cursor].t <= t + 1e-9:
            tracker.push(pending[cursor])
            cursor += 1
        target = tracker.target_at(t)
        z = tracker.axis.z
        v = tracker.tick(t)
        if tracker.stale:
            rows.append((t, target, z, 0.0, "abort"))
            break
        rows.append((t, target, z, v, "track"))
        needle.append(z)
        reference.append(truth_fn(t) if truth_fn is not None else target)

    trace = pd.DataFrame(rows, columns=list(TRACE_COLUMNS))
    if not needle:
        raise ValidationError("target stream delivered no usable update")
    return TrackingResult(trace, tracking_metrics(needle, reference), tracker.stale, tracker.axis)
