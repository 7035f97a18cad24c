"""
config.py

Experiment configuration. A run is described by one dotenv-format file of
`KEY=value` lines grouped by section prefix (RUN_, MOTION_, OBS_, PRED_,
CTRL_, PROC_). Process environment variables override file values. The
resolved values are validated, turned into the typed settings objects the
modules take, and hashed into a digest that every output file carries.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Final, Mapping

from dotenv import dotenv_values

from app.controller import ControllerConfig
from app.exceptions import ConfigError, ValidationError
from app.lstm import TrainConfig
from app.motion import DisturbanceSpec, MotionProfile
from app.observation import ImagingGeometry, ObservationNoise
from app.procedure import ProcedureConfig, SimulationSetup
from app.predictors import PREDICTOR_NAMES

# ---------------------------------------------------------------------------
# 1.  Schema: key -> (kind, default)
# ---------------------------------------------------------------------------
SECTIONS: Final = ("RUN_", "MOTION_", "OBS_", "PRED_", "CTRL_", "PROC_")

SCHEMA: Final[dict[str, tuple[str, Any]]] = {
    # run
    "RUN_SEED": ("int", 0),
    "RUN_SEEDS": ("int", 1),
    "RUN_OUT_DIR": ("str", "out"),
    "RUN_WORKERS": ("int", 1),
    "RUN_DURATION_S": ("float", 1800.0),
    "RUN_SAMPLE_RATE_HZ": ("float", 4.0),
    "RUN_AMPLITUDES_MM": ("floats", (0.05, 0.1, 0.15)),
    "RUN_RATES_BPM": ("floats", (8.0, 9.0, 10.0)),
    "RUN_PREDICTOR": ("str", "lstm"),
    # motion
    "MOTION_AMPLITUDE_MM": ("float", 0.1),
    "MOTION_RATE_BPM": ("float", 8.0),
    "MOTION_PHASE0": ("float", 0.0),
    "MOTION_BASELINE_ILM_MM": ("float", 2.2),
    "MOTION_RETINA_THICKNESS_MM": ("float", 0.25),
    "MOTION_DEFORMATION_MM": ("float", 0.0),
    "MOTION_DRIFT_RATE": ("float", 0.002),
    "MOTION_DRIFT_SPAN_MM": ("float", 0.05),
    "MOTION_AM_DEPTH": ("float", 0.1),
    "MOTION_AM_RATE_HZ": ("float", 0.013),
    "MOTION_FM_DEPTH": ("float", 0.0),
    "MOTION_FM_RATE_HZ": ("float", 0.007),
    "MOTION_HARMONIC2": ("float", 0.0),
    "MOTION_NOISE_SD_MM": ("float", 0.0),
    # observation
    "OBS_IMAGE_HEIGHT_PX": ("int", 1024),
    "OBS_MM_PER_PX": ("float", 3.379 / 1024),
    "OBS_WINDOW_TOP_MM": ("float", 0.5),
    "OBS_DEPTH_SIGN": ("int", 1),
    "OBS_SD_PX": ("float", 3.0),
    "OBS_NEEDLE_SD_PX": ("float", 2.0),
    "OBS_OUTLIER_PROB": ("float", 0.01),
    "OBS_OUTLIER_SCALE_PX": ("float", 50.0),
    "OBS_OCCLUSION_EXTRA_SD_PX": ("float", 0.0),
    "OBS_DROPOUT_PROB": ("float", 0.0),
    "OBS_LATENCY_S": ("float", 0.2),
    # predictor
    "PRED_EPOCHS": ("int", 300),
    "PRED_LEARNING_RATE": ("float", 0.005),
    "PRED_BETA1": ("float", 0.9),
    "PRED_BETA2": ("float", 0.999),
    "PRED_EPS": ("float", 1e-8),
    "PRED_BATCH_SIZE": ("int", 256),
    "PRED_WINDOW": ("int", 20),
    "PRED_HIDDEN_SIZE": ("int", 32),
    "PRED_TRAIN_FRACTION": ("float", 0.8),
    "PRED_LOG_EVERY": ("int", 50),
    "PRED_FFT_PAD": ("int", 256),
    # controller
    "CTRL_K_V": ("float", 10.0),
    "CTRL_V_MAX": ("float", 0.5),
    "CTRL_LOOP_RATE_HZ": ("float", 50.0),
    "CTRL_RESOLUTION_MM": ("float", 0.001),
    "CTRL_REPEATABILITY_MM": ("float", 0.003),
    # procedure
    "PROC_PREP_OFFSET_MM": ("float", 0.5),
    "PROC_SYNC_OFFSET_MM": ("float", 0.6758),
    "PROC_INSERTION_OFFSET_MM": ("float", 0.10137),
    "PROC_E_MAX_MM": ("float", 0.05),
    "PROC_SETTLE_WINDOW": ("int", 40),
    "PROC_INJECTION_DURATION_S": ("float", 10.0),
    "PROC_RAMP_RATE": ("float", 0.05),
    "PROC_SAFETY_BOUND_MM": ("float", 0.3),
    "PROC_NEEDLE_START_MM": ("float", 1.0),
    "PROC_TARGET_MODE": ("str", "interpolate"),
    "PROC_PHASE5_REFERENCE": ("str", "ilm_prediction"),
    "PROC_RESTART_ON_SANITY_FAIL": ("bool", False),
    "PROC_MAX_RESTARTS": ("int", 1),
    "PROC_SYNC_MIN_S": ("float", 20.0),
    "PROC_SYNC_MAX_S": ("float", 120.0),
    "PROC_PLATEAU_TOL_MM": ("float", 0.003),
    "PROC_METRICS_SKIP_S": ("float", 5.0),
    "PROC_PREP_TIMEOUT_S": ("float", 10.0),
    "PROC_STALENESS_S": ("float", 0.75),
}

# keys that never change a number in the outputs
_UNHASHED: Final = frozenset({"RUN_SEED", "RUN_SEEDS", "RUN_OUT_DIR", "RUN_WORKERS"})

_TRUE = {"1", "true", "yes", "y", "on"}
_FALSE = {"0", "false", "no", "n", "off"}
_KEY_LINE = re.compile(r"^\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*=")


# ---------------------------------------------------------------------------
# 2.  Helpers
# ---------------------------------------------------------------------------
def _key_lines(path: Path) -> dict[str, int]:
    lines: dict[str, int] = {}
    for number, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        match = _KEY_LINE.match(text)
        if match:
            lines[match.group(1)] = number
    return lines


def _coerce(kind: str, raw: str) -> Any:
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "floats":
        values = tuple(float(part) for part in raw.split(",") if part.strip())
        if not values:
            raise ValueError("empty list")
        return values
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError("not boolean-like")
    return raw


def _canonical(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


@dataclass(frozen=True, slots=True)
class _Resolved:
    values: dict[str, Any]
    origins: dict[str, str]

    def where(self, key: str) -> str:
        return f"{self.origins.get(key, 'default')}: {key}"

    def __getitem__(self, key: str) -> Any:
        return self.values[key]


def _blame(res: _Resolved, fields: Mapping[str, str], message: str) -> str:
    """Key behind a validation message: named in it, set by the user, else the first of the section."""
    named = [key for kw, key in fields.items() if re.search(rf"\b{re.escape(kw)}\b", message)]
    overridden = [key for key in fields.values() if key in res.origins]
    for candidates in ([k for k in named if k in res.origins], named, overridden):
        if candidates:
            return candidates[0]
    return next(iter(fields.values()))


def _resolve(path: Path | None, environ: Mapping[str, str]) -> _Resolved:
    file_values: dict[str, str | None] = {}
    lines: dict[str, int] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        file_values = dict(dotenv_values(path))
        lines = _key_lines(path)
        for key in file_values:
            if key.startswith(SECTIONS) and key not in SCHEMA:
                raise ConfigError(f"{path}:{lines.get(key, '?')}: {key} is not a known setting")

    values: dict[str, Any] = {}
    origins: dict[str, str] = {}
    for key, (kind, default) in SCHEMA.items():
        if key in environ:
            raw, origin = environ[key], "env"
        elif file_values.get(key) is not None:
            raw, origin = file_values[key], f"{path}:{lines.get(key, '?')}"
        else:
            values[key] = default
            continue
        try:
            values[key] = _coerce(kind, raw)
        except ValueError as exc:
            raise ConfigError(f"{origin}: {key} must be {kind}, got {raw!r}") from exc
        origins[key] = origin
    return _Resolved(values, origins)


# ---------------------------------------------------------------------------
# 3.  Configuration dataclass
# ---------------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    # -- Run
    seed: int
    seeds: int
    out_dir: Path
    workers: int
    duration_s: float
    sample_rate_hz: float
    amplitudes: tuple[float, ...]
    rates_bpm: tuple[float, ...]
    predictor: str

    # -- Module settings
    profile: MotionProfile
    geometry: ImagingGeometry
    noise: ObservationNoise
    train: TrainConfig
    fft_pad: int
    controller: ControllerConfig
    resolution: float
    repeatability_sd: float
    procedure: ProcedureConfig

    # -- Provenance
    digest: str
    source: Path | None = None
    values: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def load(cls, path: Path | str | None = None, environ: Mapping[str, str] | None = None) -> "ExperimentConfig":
        """Read the file (if any), apply environment overrides, validate and materialise."""
        source = Path(path) if path is not None else None
        res = _resolve(source, os.environ if environ is None else environ)
        cfg = cls._build(res, source)
        cfg._validate(res)
        return cfg

    @classmethod
    def _build(cls, res: _Resolved, source: Path | None) -> "ExperimentConfig":
        def section(factory, fields: Mapping[str, str], **fixed):
            """Build factory(kwarg=res[key] for kwarg, key in fields); errors name the failing key."""
            try:
                return factory(**{kw: res[key] for kw, key in fields.items()}, **fixed)
            except ValidationError as exc:
                raise ConfigError(f"{res.where(_blame(res, fields, exc.message))}: {exc.message}") from exc

        seed = max(res["RUN_SEED"], 0)
        disturbance = section(DisturbanceSpec, {
            "drift_rate": "MOTION_DRIFT_RATE", "am_depth": "MOTION_AM_DEPTH",
            "fm_depth": "MOTION_FM_DEPTH", "harmonic2_frac": "MOTION_HARMONIC2",
            "noise_sd": "MOTION_NOISE_SD_MM", "drift_span": "MOTION_DRIFT_SPAN_MM",
            "am_rate_hz": "MOTION_AM_RATE_HZ", "fm_rate_hz": "MOTION_FM_RATE_HZ",
        }, seed=seed)
        profile = section(MotionProfile, {
            "amplitude": "MOTION_AMPLITUDE_MM", "rate_bpm": "MOTION_RATE_BPM",
            "phase0": "MOTION_PHASE0", "baseline_ilm": "MOTION_BASELINE_ILM_MM",
            "retina_thickness": "MOTION_RETINA_THICKNESS_MM", "deformation": "MOTION_DEFORMATION_MM",
        }, disturbance=disturbance)
        geometry = section(ImagingGeometry, {
            "image_height_px": "OBS_IMAGE_HEIGHT_PX", "mm_per_px": "OBS_MM_PER_PX",
            "window_top_z": "OBS_WINDOW_TOP_MM", "depth_sign": "OBS_DEPTH_SIGN",
        })
        noise = section(ObservationNoise, {
            "sd_px": "OBS_SD_PX", "needle_sd_px": "OBS_NEEDLE_SD_PX",
            "outlier_prob": "OBS_OUTLIER_PROB", "outlier_scale_px": "OBS_OUTLIER_SCALE_PX",
            "occlusion_extra_sd_px": "OBS_OCCLUSION_EXTRA_SD_PX", "dropout_prob": "OBS_DROPOUT_PROB",
            "latency_s": "OBS_LATENCY_S",
        }, seed=seed)
        train = section(TrainConfig, {
            "epochs": "PRED_EPOCHS", "learning_rate": "PRED_LEARNING_RATE",
            "beta1": "PRED_BETA1", "beta2": "PRED_BETA2", "eps": "PRED_EPS",
            "batch_size": "PRED_BATCH_SIZE", "window": "PRED_WINDOW",
            "hidden_size": "PRED_HIDDEN_SIZE", "train_fraction": "PRED_TRAIN_FRACTION",
            "log_every": "PRED_LOG_EVERY",
        }, seed=seed)
        controller = section(ControllerConfig, {
            "k_v": "CTRL_K_V", "v_max": "CTRL_V_MAX", "loop_rate_hz": "CTRL_LOOP_RATE_HZ",
        })
        procedure = section(ProcedureConfig, {
            "prep_offset": "PROC_PREP_OFFSET_MM", "sync_offset": "PROC_SYNC_OFFSET_MM",
            "insertion_offset": "PROC_INSERTION_OFFSET_MM", "e_max": "PROC_E_MAX_MM",
            "settle_window": "PROC_SETTLE_WINDOW", "injection_duration": "PROC_INJECTION_DURATION_S",
            "ramp_rate": "PROC_RAMP_RATE", "safety_bound": "PROC_SAFETY_BOUND_MM",
            "needle_start": "PROC_NEEDLE_START_MM", "target_mode": "PROC_TARGET_MODE",
            "phase5_reference": "PROC_PHASE5_REFERENCE",
            "restart_on_sanity_fail": "PROC_RESTART_ON_SANITY_FAIL",
            "max_restarts": "PROC_MAX_RESTARTS", "sync_min_s": "PROC_SYNC_MIN_S",
            "sync_max_s": "PROC_SYNC_MAX_S", "plateau_tol": "PROC_PLATEAU_TOL_MM",
            "metrics_skip_s": "PROC_METRICS_SKIP_S", "prep_timeout_s": "PROC_PREP_TIMEOUT_S",
            "staleness_s": "PROC_STALENESS_S",
        })
        hashed = {k: _canonical(v) for k, v in res.values.items() if k not in _UNHASHED}
        digest = hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()[:12]
        return cls(
            seed=res["RUN_SEED"], seeds=res["RUN_SEEDS"], out_dir=Path(res["RUN_OUT_DIR"]),
            workers=res["RUN_WORKERS"], duration_s=res["RUN_DURATION_S"],
            sample_rate_hz=res["RUN_SAMPLE_RATE_HZ"], amplitudes=res["RUN_AMPLITUDES_MM"],
            rates_bpm=res["RUN_RATES_BPM"], predictor=res["RUN_PREDICTOR"].lower(),
            profile=profile, geometry=geometry, noise=noise, train=train,
            fft_pad=res["PRED_FFT_PAD"], controller=controller,
            resolution=res["CTRL_RESOLUTION_MM"], repeatability_sd=res["CTRL_REPEATABILITY_MM"],
            procedure=procedure, digest=digest, source=source, values=dict(res.values),
        )

    # -----------------------------------------------------------------------
    # 4.  Validation
    # -----------------------------------------------------------------------
    def _validate(self, res: _Resolved) -> None:
        if self.seed < 0:
            raise ConfigError(f"{res.where('RUN_SEED')} must be >= 0, got {self.seed}")
        if self.seeds <= 0:
            raise ConfigError(f"{res.where('RUN_SEEDS')} must be > 0, got {self.seeds}")
        if self.workers <= 0:
            raise ConfigError(f"{res.where('RUN_WORKERS')} must be > 0, got {self.workers}")
        if not self.duration_s > 0:
            raise ConfigError(f"{res.where('RUN_DURATION_S')} must be > 0")
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"{res.where('RUN_SAMPLE_RATE_HZ')} must be > 0")
        if any(a < 0 for a in self.amplitudes):
            raise ConfigError(f"{res.where('RUN_AMPLITUDES_MM')} must be >= 0")
        if any(r <= 0 for r in self.rates_bpm):
            raise ConfigError(f"{res.where('RUN_RATES_BPM')} must be > 0")
        if self.predictor not in PREDICTOR_NAMES:
            raise ConfigError(f"{res.where('RUN_PREDICTOR')} must be one of {PREDICTOR_NAMES}")
        if self.fft_pad < self.train.window:
            raise ConfigError(f"{res.where('PRED_FFT_PAD')} must be >= PRED_WINDOW")
        if self.resolution <= 0 or self.repeatability_sd < 0:
            raise ConfigError(f"{res.where('CTRL_RESOLUTION_MM')} must be > 0 "
                              "and CTRL_REPEATABILITY_MM >= 0")
        if self.procedure.insertion_offset >= self.profile.retina_thickness:
            raise ConfigError(f"{res.where('PROC_INSERTION_OFFSET_MM')} must be below "
                              f"MOTION_RETINA_THICKNESS_MM ({self.profile.retina_thickness})")

    # -----------------------------------------------------------------------
    # 5.  Derived settings
    # -----------------------------------------------------------------------
    def profile_for(self, amplitude: float, rate_bpm: float, seed: int | None = None) -> MotionProfile:
        disturbance = replace(self.profile.disturbance,
                              seed=self.profile.disturbance.seed if seed is None else seed)
        return replace(self.profile, amplitude=amplitude, rate_bpm=rate_bpm, disturbance=disturbance)

    def setup(self, profile: MotionProfile | None = None) -> SimulationSetup:
        return SimulationSetup(
            profile=profile or self.profile,
            geometry=self.geometry,
            noise=self.noise,
            controller=self.controller,
            procedure=self.procedure,
            resolution=self.resolution,
            repeatability_sd=self.repeatability_sd,
            sample_rate_hz=self.sample_rate_hz,
        )

    def __str__(self) -> str:
        """Human-readable dump of the resolved settings."""
        parts = [f"Experiment Config (digest {self.digest}):"]
        parts += [f"  {key:<30} = {value}" for key, value in self.values.items()]
        return "\n".join(parts)
