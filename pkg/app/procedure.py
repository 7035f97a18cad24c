"""
procedure.py

The five-phase autonomous injection run: motion estimation, needle
registration, sanity check, motion synchronization above the ILM, insertion
and injection inside the retina. One executor owns all mutable state and
advances a single clock at the control rate; segmentation samples arrive on
the scan-rate grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Protocol

import numpy as np
import pandas as pd

from app.artifacts import Provenance, append_csv, write_csv
from app.controller import (
    TRACE_COLUMNS,
    AxisTracker,
    ControllerConfig,
    RobotAxis,
    TargetUpdate,
    TrackingMetrics,
    tracking_metrics,
    DEFAULT_REPEATABILITY_MM,
    DEFAULT_RESOLUTION_MM,
    DEFAULT_STALENESS_S,
    METRIC_KEYS,
)
from app.exceptions import ProcedureAbort, ValidationError
from app.lstm import SequenceWindow
from app.motion import EyePhantom, MotionProfile
from app.observation import (
    SAMPLE_RATE_HZ,
    DepthSample,
    ImagingGeometry,
    LayerGate,
    ObservationNoise,
    depth_row,
    layer_time,
    observe,
    px_to_mm,
)
from app.predictors import Predictor
from app.procedure_state import (
    Phase,
    ProcedureMemento,
    ProcedureState,
    StateHistory,
    format_detail,
)
from app.registration import (
    REGISTRATION_WINDOW,
    apply_registration,
    build_registration,
    iqr_filter,
    registration_record,
)

logger = logging.getLogger("subretinal.procedure")

PROCEDURE_TRACE_COLUMNS = TRACE_COLUMNS + ("ilm_mm", "rpe_mm")
EVENT_COLUMNS = ("t_s", "phase", "event", "detail")
TARGET_MODES = ("interpolate", "hold")
PHASE5_REFERENCES = ("ilm_prediction", "rpe_observed")

# stream id of the axis repeatability draws, kept apart from observation channels
_AXIS_STREAM = 101


# --------------------------------------------------  Config
@dataclass(frozen=True, slots=True)
class ProcedureConfig:
    prep_offset: float = 0.5               # mm above ILM
    sync_offset: float = 0.6758            # mm above ILM
    insertion_offset: float = 0.10137      # mm above RPE
    e_max: float = 0.05                    # mm
    settle_window: int = 40                # samples
    injection_duration: float = 10.0       # s
    ramp_rate: float = 0.05                # mm/s
    safety_bound: float = 0.3              # mm
    needle_start: float = 1.0              # mm, robot frame
    target_mode: str = "interpolate"
    phase5_reference: str = "ilm_prediction"
    restart_on_sanity_fail: bool = False
    max_restarts: int = 1
    sync_min_s: float = 20.0
    sync_max_s: float = 120.0
    plateau_tol: float = 0.003             # mm
    metrics_skip_s: float = 5.0
    prep_timeout_s: float = 10.0
    staleness_s: float = DEFAULT_STALENESS_S

    def __post_init__(self) -> None:
        floats = ("prep_offset", "sync_offset", "insertion_offset", "e_max", "injection_duration",
                  "ramp_rate", "safety_bound", "needle_start", "sync_min_s", "sync_max_s",
                  "plateau_tol", "metrics_skip_s", "prep_timeout_s", "staleness_s")
        for name in floats:
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        positive = ("prep_offset", "sync_offset", "insertion_offset", "injection_duration",
                    "ramp_rate", "safety_bound", "plateau_tol", "prep_timeout_s", "staleness_s")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.e_max < 0:
            raise ValidationError("e_max must be >= 0")
        if self.settle_window < 2:
            raise ValidationError("settle_window must be >= 2 samples")
        if not 0 <= self.metrics_skip_s < self.sync_min_s <= self.sync_max_s:
            raise ValidationError("need 0 <= metrics_skip_s < sync_min_s <= sync_max_s")
        if self.target_mode not in TARGET_MODES:
            raise ValidationError(f"target_mode must be one of {TARGET_MODES}")
        if self.phase5_reference not in PHASE5_REFERENCES:
            raise ValidationError(f"phase5_reference must be one of {PHASE5_REFERENCES}")
        if self.max_restarts < 0:
            raise ValidationError("max_restarts must be >= 0")


@dataclass(frozen=True, slots=True)
class SimulationSetup:
    """Everything one closed-loop run needs apart from the predictor and the seed."""

    profile: MotionProfile
    geometry: ImagingGeometry = field(default_factory=ImagingGeometry)
    noise: ObservationNoise = field(default_factory=ObservationNoise)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    procedure: ProcedureConfig = field(default_factory=ProcedureConfig)
    resolution: float = DEFAULT_RESOLUTION_MM
    repeatability_sd: float = DEFAULT_REPEATABILITY_MM
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        if self.procedure.insertion_offset >= self.profile.retina_thickness:
            raise ValidationError(
                f"insertion_offset {self.procedure.insertion_offset} mm must be below "
                f"the retina thickness {self.profile.retina_thickness} mm"
            )
        if not (math.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValidationError("sample_rate_hz must be finite and > 0")


# --------------------------------------------------  Events & observers
class ProcedureEvent(NamedTuple):
    t_s: float
    phase: str
    event: str
    detail: str


class Observer(Protocol):
    def update(self, procedure: "Procedure", event: ProcedureEvent) -> None: ...


class LoggingObserver:
    """Write each procedure event to a log file (one handler per path)."""

    def __init__(self, log_file: Path | str) -> None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        self._logger = logging.getLogger("subretinal.events")
        self._logger.setLevel(logging.INFO)

        existing = {getattr(h, "baseFilename", None) for h in self._logger.handlers}
        if str(log_path.resolve()) not in existing:
            handler = logging.FileHandler(log_path, encoding="utf-8", delay=True)
            handler.setFormatter(logging.Formatter("%(asctime)s - %(message)s"))
            self._logger.addHandler(handler)

    def update(self, procedure: "Procedure", event: ProcedureEvent) -> None:
        level = logging.WARNING if event.event in ("abort", "rpe_touch") else logging.INFO
        self._logger.log(level, "seed=%d t=%.2f %s %s %s",
                         procedure.seed, event.t_s, event.phase, event.event, event.detail)


class EventLogObserver:
    """Append each event to a CSV log; the first event writes the header."""

    def __init__(self, csv_file: Path | str, prov: Provenance) -> None:
        self._csv = Path(csv_file)
        self._prov = prov
        self._written = 0

    def update(self, procedure: "Procedure", _event: ProcedureEvent) -> None:
        frame = procedure.event_frame()
        if self._written == 0:
            write_csv(frame, self._csv, self._prov)
        elif len(frame) > self._written:
            append_csv(frame.iloc[self._written:], self._csv)
        self._written = len(frame)


# --------------------------------------------------  Report
@dataclass(frozen=True, slots=True, eq=False)
class ProcedureReport:
    seed: int
    state: ProcedureState
    trace: pd.DataFrame
    events: pd.DataFrame
    above_ilm: TrackingMetrics | None
    inside_retina: TrackingMetrics | None
    abort_phase: str | None
    abort_reason: str | None
    rpe_touches: int
    thickness_mm: float | None
    registration: dict[str, float] | None
    history: tuple[ProcedureState, ...]

    @property
    def completed(self) -> bool:
        return self.state.phase is Phase.COMPLETED

    @property
    def success(self) -> bool:
        return self.completed and self.state.injection_success

    def summary_row(self) -> dict[str, object]:
        row: dict[str, object] = {
            "seed": self.seed,
            "final_phase": self.state.phase.value,
            "injection_success": self.state.injection_success,
            "e_um": np.nan if self.state.e is None else self.state.e * 1000.0,
            "thickness_um": np.nan if self.thickness_mm is None else self.thickness_mm * 1000.0,
            "restarts": self.state.restarts,
            "rpe_touches": self.rpe_touches,
            "abort_phase": self.abort_phase or "",
            "abort_reason": self.abort_reason or "",
        }
        for label, m in (("above_ilm", self.above_ilm), ("inside_retina", self.inside_retina)):
            values = m.as_row() if m else dict.fromkeys(METRIC_KEYS, np.nan)
            row.update({f"{label}_{k}": v for k, v in values.items()})
        return row


class _Prediction(NamedTuple):
    k: int
    predicted: float
    truth: float
    valid: bool


# --------------------------------------------------  Executor
class Procedure:
    """Single-threaded executor for one run."""

    def __init__(
        self,
        setup: SimulationSetup,
        predictor: Predictor,
        seed: int = 0,
        observers: Iterable[Observer] = (),
    ) -> None:
        self.setup = setup
        self.cfg = setup.procedure
        self.predictor = predictor
        self.seed = seed
        self.noise = replace(setup.noise, seed=seed)
        self.phantom = EyePhantom(setup.profile)
        axis = RobotAxis(z_cmd=self.cfg.needle_start, resolution=setup.resolution,
                         repeatability_sd=setup.repeatability_sd)
        self.tracker = AxisTracker(
            setup.controller, axis, np.random.default_rng([seed, _AXIS_STREAM]),
            staleness_s=self.cfg.staleness_s, sample_period=1.0 / setup.sample_rate_hz,
        )
        self.state = ProcedureState()
        self.history = StateHistory()
        self.history.push(ProcedureMemento(self.state))
        self._observers: list[Observer] = list(observers)
        self._events: list[ProcedureEvent] = []
        self._rows: list[tuple] = []
        self._tick = 0
        self._next_sample = 0

        self._ilm_gate = LayerGate()
        self._rpe_gate = LayerGate()
        self._ilm_mm: list[float] = []          # image-frame mm, held over gaps
        self._ilm_last_t: float | None = None
        self._rpe_mm: float | None = None
        self._needle_px: list[float | None] = []
        self._thickness: list[float] = []
        self._pending: tuple[int, float] | None = None
        self._predictions: list[_Prediction] = []
        self._pred_next: float | None = None

        self.thickness_mm: float | None = None
        self.prep_plane: float | None = None
        self.above_ilm: TrackingMetrics | None = None
        self.inside_retina: TrackingMetrics | None = None
        self.rpe_touches = 0
        self.abort: ProcedureAbort | None = None

    # ---------- observer API
    def add_observer(self, obs: Observer) -> None:
        if obs not in self._observers:
            self._observers.append(obs)

    def _emit(self, event: str, **fields: object) -> None:
        ev = ProcedureEvent(self.t, self.state.phase.value, event, format_detail(**fields))
        self._events.append(ev)
        for obs in tuple(self._observers):
            try:
                obs.update(self, ev)
            except Exception:  # pragma: no cover
                logging.exception("Observer %s failed", obs)

    def _transition(self, to: Phase) -> None:
        frm = self.state.phase
        self.state = self.state.transition(to)
        self.history.push(ProcedureMemento(self.state))
        logger.info("seed=%d t=%.2f %s -> %s", self.seed, self.t, frm.value, to.value)
        self._emit("transition", **{"from": frm.value, "to": to.value})

    def event_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._events, columns=list(EVENT_COLUMNS))

    # ---------- clock
    @property
    def t(self) -> float:
        return self._tick / self.setup.controller.loop_rate_hz

    @property
    def axis(self) -> RobotAxis:
        return self.tracker.axis

    def _fail(self, reason: str) -> ProcedureAbort:
        return ProcedureAbort(self.state.phase.value, reason)

    def _step(self, label: str, command: bool, on_sample: Callable[[float], None] | None = None) -> bool:
        """Advance one control tick. Returns True when a sample was taken."""
        t = self.t
        sampled = False
        if self._next_sample / self.setup.sample_rate_hz <= t + 1e-9:
            t_k = self._next_sample / self.setup.sample_rate_hz
            self._acquire(t_k)
            self._next_sample += 1
            sampled = True
            if on_sample is not None:
                on_sample(t_k)

        z = self.axis.z
        ilm, rpe = self.phantom.layers_at(t, z)
        target = self.tracker.target_at(t) if command else None
        if z >= rpe:
            self.rpe_touches += 1
            self._rows.append((t, target, z, 0.0, label, ilm, rpe))
            self._emit("rpe_touch", needle_mm=z, rpe_mm=rpe)
            raise self._fail("needle touched the RPE")
        v = self.tracker.tick(t) if command else self.tracker.hold()
        if self.tracker.stale:
            raise self._fail("target stream stale")
        self._rows.append((t, target, z, v, label, ilm, rpe))
        self._tick += 1
        return sampled

    # ---------- sensing
    def _acquire(self, t_k: float) -> None:
        k = self._next_sample
        z = self.axis.z
        layers = self.phantom.layers_at(t_k, z)
        seen = layers
        if self.noise.latency_s > 0.0:
            seen = self.phantom.layers_seen(float(layer_time(t_k, self.noise)))
        sample: DepthSample = observe(seen, z, self.setup.geometry, self.noise, t_k,
                                      self.setup.sample_rate_hz)
        geometry = self.setup.geometry

        ilm_valid = False
        if sample.ilm_px is not None:
            ilm_mm = px_to_mm(sample.ilm_px, geometry)
            if self._ilm_gate.accept(t_k, ilm_mm):
                ilm_valid = True
                self._ilm_mm.append(ilm_mm)
                self._ilm_last_t = t_k
        if not ilm_valid:
            if self._ilm_mm:
                self._ilm_mm.append(self._ilm_mm[-1])
            since = t_k if self._ilm_last_t is None else t_k - self._ilm_last_t
            if since > self.cfg.staleness_s + 1e-9:
                raise self._fail("ILM stream lost")

        rpe_valid = False
        if sample.rpe_px is not None:
            rpe_mm = px_to_mm(sample.rpe_px, geometry)
            if self._rpe_gate.accept(t_k, rpe_mm):
                rpe_valid = True
                self._rpe_mm = rpe_mm
        if ilm_valid and rpe_valid:
            self._thickness.append(self._rpe_mm - self._ilm_mm[-1])
        self._needle_px.append(sample.needle_px)

        if self._pending is not None and self._pending[0] == k:
            self._predictions.append(_Prediction(k, self._pending[1], layers[0], ilm_valid))
        self._pending = None
        self._pred_next = None
        window = self.predictor.window
        if len(self._ilm_mm) >= window:
            values = np.asarray(self._ilm_mm[-window:])
            self._pred_next = self.predictor.predict(SequenceWindow(values, t_k))
            self._pending = (k + 1, self._pred_next)

    def _to_robot(self, z_image: float) -> float:
        return apply_registration(self.state.registration, depth_row(z_image, self.setup.geometry))

    def _require_prediction(self) -> float:
        if self._pred_next is None:
            raise self._fail("no ILM prediction available")
        return self._pred_next

    def _push(self, t_k: float, target: float) -> None:
        if self.cfg.target_mode == "interpolate":
            current = self.tracker.target_at(t_k)
            start = target if current is None else current
            self.tracker.push(TargetUpdate(t_k, start, target))
        else:
            self.tracker.push(TargetUpdate.hold(t_k, target))

    # ---------- phase 1
    def run_phase1_motion_estimation(self) -> float:
        """Hold the needle, watch the ILM, score one-step predictions."""
        cfg = self.cfg
        needed = self.predictor.window + cfg.settle_window
        first = self._next_sample
        while self._next_sample - first < needed:
            self._step(Phase.MOTION_ESTIMATION.value, command=False)

        lo = self._next_sample - cfg.settle_window
        scored = [p for p in self._predictions if p.k >= lo and p.valid]
        if not scored:
            raise self._fail("no valid prediction in the validation window")
        e = max(abs(p.predicted - p.truth) for p in scored)
        recent = self._thickness[-needed:]
        if not recent:
            raise self._fail("RPE not observed")
        self.thickness_mm = float(np.median(recent))
        self.state = replace(self.state, e=e)
        self._emit("estimate", e_mm=e, thickness_mm=self.thickness_mm, n=len(scored))
        self._transition(Phase.NEEDLE_REGISTRATION)
        return e

    # ---------- phase 2
    def run_phase2_registration(self) -> None:
        cfg = self.cfg
        needle = [p for p in self._needle_px[-REGISTRATION_WINDOW:] if p is not None]
        if len(needle) < 4:
            raise self._fail("needle not detected")
        filtered = iqr_filter(needle)
        tf = build_registration(filtered.value_px, self.axis.reading,
                                self.setup.geometry.mm_per_px, self.setup.geometry.depth_sign)
        self.state = replace(self.state, registration=tf)
        self._emit("registration", **registration_record(tf, filtered), sign=tf.sign)

        span = self.predictor.window + cfg.settle_window
        shallowest = min(self._to_robot(z) for z in self._ilm_mm[-span:])
        self.prep_plane = shallowest - cfg.prep_offset
        plane = self.prep_plane
        self.tracker.push(TargetUpdate.hold(self.t, plane))
        started = self.t
        while not (abs(plane - self.axis.reading) <= self.setup.resolution
                   and abs(self.axis.v_cmd) <= self.setup.controller.k_v * self.setup.resolution):
            if self.t - started > cfg.prep_timeout_s:
                raise self._fail("prep move timed out")
            self._step(Phase.NEEDLE_REGISTRATION.value, command=True,
                       on_sample=lambda t_k: self.tracker.push(TargetUpdate.hold(t_k, plane)))
        self._emit("prep_plane", z_mm=plane)
        self._transition(Phase.SANITY_CHECK)

    # ---------- phase 3
    def run_phase3(self) -> bool:
        passed, reasons = run_phase3_sanity_check(
            self.state.e, self.cfg.e_max, self._needle_px[-1], self.setup.geometry)
        self.state = replace(self.state, sanity_passed=passed)
        self._emit("sanity", passed=passed, reasons="+".join(reasons))
        if passed:
            self._transition(Phase.MOTION_SYNC)
            return True
        if self.cfg.restart_on_sanity_fail and self.state.restarts < self.cfg.max_restarts:
            logger.warning("sanity check failed (%s), repositioning and restarting", ", ".join(reasons))
            self.tracker.axis = replace(self.axis, z_cmd=self.prep_plane, v_cmd=0.0)
            self._transition(Phase.MOTION_ESTIMATION)
            self._emit("restart", needle_mm=self.axis.z)
            return False
        raise self._fail(", ".join(reasons))

    # ---------- phase 4
    def run_phase4_sync(self) -> TrackingMetrics:
        cfg = self.cfg
        start, first_row = self.t, len(self._rows)

        def on_sample(t_k: float) -> None:
            self._push(t_k, self._to_robot(self._require_prediction()) - cfg.sync_offset)

        window_s = cfg.settle_window / self.setup.sample_rate_hz
        while True:
            sampled = self._step(Phase.MOTION_SYNC.value, command=True, on_sample=on_sample)
            t, _, z, _, _, ilm, _ = self._rows[-1]
            if abs(z - (ilm - cfg.sync_offset)) > cfg.safety_bound:
                raise self._fail("tracking error exceeds safety bound")
            elapsed = t - start
            if sampled and elapsed >= cfg.sync_min_s:
                rows = self._rows[first_row:]
                cur = _window_rmse(rows, t - window_s, t, cfg.sync_offset)
                prev = _window_rmse(rows, t - 2 * window_s, t - window_s, cfg.sync_offset)
                if abs(cur - prev) <= cfg.plateau_tol:
                    self._emit("stable", rmse_mm=cur)
                    break
            if elapsed >= cfg.sync_max_s:
                raise self._fail("synchronization did not stabilize")

        rows = [r for r in self._rows[first_row:] if r[0] >= start + cfg.metrics_skip_s]
        self.above_ilm = tracking_metrics([r[2] for r in rows],
                                          [r[5] - cfg.sync_offset for r in rows], cfg.sync_offset)
        self._emit("above_ilm", rmse_um=self.above_ilm.rmse_um, maxae_um=self.above_ilm.maxae_um)
        self._transition(Phase.INSERTION)
        return self.above_ilm

    # ---------- phase 5
    def run_phase5_insertion(self) -> bool:
        cfg = self.cfg
        period = 1.0 / self.setup.sample_rate_hz
        start = self.t
        depth0 = -cfg.sync_offset
        final_depth = self.thickness_mm - cfg.insertion_offset
        ramp_s = max(final_depth - depth0, 0.0) / cfg.ramp_rate
        end_s = ramp_s + cfg.injection_duration

        def on_sample(t_k: float) -> None:
            ilm_next = self._to_robot(self._require_prediction())
            ahead = t_k + period - start
            target = ilm_next + min(depth0 + cfg.ramp_rate * ahead, final_depth)
            if cfg.phase5_reference == "rpe_observed" and self._rpe_mm is not None:
                limit = self._to_robot(self._rpe_mm) - cfg.insertion_offset
                target = limit if ahead >= ramp_s else min(target, limit)
            self._push(t_k, target)

        contained = True
        dwell: list[tuple] = []
        while self.t - start < end_s:
            self._step(Phase.INSERTION.value, command=True, on_sample=on_sample)
            row = self._rows[-1]
            if row[0] - start < ramp_s:
                continue
            dwell.append(row)
            _, _, z, _, _, ilm, rpe = row
            if contained and not ilm < z < rpe:
                contained = False
                logger.warning("needle left the retina during the dwell at t=%.2f", row[0])
                self._emit("retracted", needle_mm=z, ilm_mm=ilm)

        self.inside_retina = tracking_metrics([r[2] for r in dwell],
                                              [r[6] - cfg.insertion_offset for r in dwell],
                                              cfg.insertion_offset)
        self._emit("inside_retina", rmse_um=self.inside_retina.rmse_um,
                   maxae_um=self.inside_retina.maxae_um)
        self.state = replace(self.state, injection_success=contained)
        self._emit("injection", success=contained)
        return contained

    # ---------- run
    def run(self) -> ProcedureReport:
        self._emit("start", seed=self.seed, predictor=self.predictor.name)
        try:
            while True:
                self.run_phase1_motion_estimation()
                self.run_phase2_registration()
                if self.run_phase3():
                    break
            self.run_phase4_sync()
            self.run_phase5_insertion()
            self._transition(Phase.COMPLETED)
        except ProcedureAbort as abort:
            self._abort(abort)
        return self.report()

    def _abort(self, abort: ProcedureAbort) -> None:
        self.abort = abort
        logger.warning("seed=%d aborted %s", self.seed, abort)
        self.tracker.hold()
        z = self.axis.z
        ilm, rpe = self.phantom.layers_at(self.t, z)
        self._rows.append((self.t, None, z, 0.0, "abort", ilm, rpe))
        self._tick += 1
        self._emit("abort", reason=abort.reason)
        self._transition(Phase.ABORTED)

    def report(self) -> ProcedureReport:
        tf = self.state.registration
        return ProcedureReport(
            seed=self.seed,
            state=self.state,
            trace=pd.DataFrame(self._rows, columns=list(PROCEDURE_TRACE_COLUMNS)),
            events=self.event_frame(),
            above_ilm=self.above_ilm,
            inside_retina=self.inside_retina,
            abort_phase=self.abort.phase if self.abort else None,
            abort_reason=self.abort.reason if self.abort else None,
            rpe_touches=self.rpe_touches,
            thickness_mm=self.thickness_mm,
            registration=None if tf is None else {"b_mm_per_px": tf.b, "p_init_px": tf.p_init,
                                                  "z_init_mm": tf.z_init},
            history=self.history.states(),
        )


def _window_rmse(rows: list[tuple], lo: float, hi: float, sync_offset: float) -> float:
    err = [r[2] - (r[5] - sync_offset) for r in rows if lo < r[0] <= hi]
    return math.sqrt(sum(e * e for e in err) / len(err)) if err else math.inf


class SanityResult(NamedTuple):
    passed: bool
    reasons: tuple[str, ...]


def run_phase3_sanity_check(
    e: float | None, e_max: float, needle_px: float | None, geometry: ImagingGeometry
) -> SanityResult:
    """Pass iff e <= e_max and the needle tip sits in the upper half of the B-scan."""
    reasons: list[str] = []
    if e is None or e > e_max:
        reasons.append("prediction error")
    if needle_px is None:
        reasons.append("needle not observed")
    elif needle_px >= geometry.image_height_px / 2:
        reasons.append("needle in lower half")
    return SanityResult(not reasons, tuple(reasons))


def run_procedure(
    setup: SimulationSetup,
    predictor: Predictor,
    seed: int = 0,
    observers: Iterable[Observer] = (),
) -> ProcedureReport:
    return Procedure(setup, predictor, seed, observers).run()
