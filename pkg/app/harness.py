"""
harness.py

Experiment orchestration behind the CLI: synthetic datasets over the
amplitude x rate grid, LSTM training, the LSTM-vs-FFT evaluation, closed-loop
procedure batches and the consolidated report. Stages talk through files in
the output directory; every CSV carries the config digest and seed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd

from app.artifacts import Provenance, read_csv, write_csv
from app.config import ExperimentConfig
from app.exceptions import ArtifactError, PredictorError, ValidationError
from app.lstm import load_model, lstm_train, save_model
from app.metrics import evaluate
from app.motion import MotionProfile, MotionTrace, generate_trace, load_trace, sample_layers, save_trace
from app.observation import gated_series, layer_time, observe, sample_log
from app.predictors import PREDICTOR_NAMES, Predictor, get_predictor, rolling_predictions
from app.procedure import EventLogObserver, LoggingObserver, ProcedureReport, run_procedure

logger = logging.getLogger("subretinal.harness")

MANIFEST_COLUMNS = ("condition", "amp_mm", "rate_bpm", "n_samples", "trace_file", "samples_file")
GRID_COLUMNS = ("condition", "amp_mm", "rate_bpm", "model", "rmse_um", "maxae_um", "mean_um",
                "n", "seed", "digest")
CONTROL_COLUMNS = ("seed", "region", "offset_um", "rmse_um", "maxae_um", "mean_um", "bias_um", "n")
EVAL_MODELS = ("lstm", "fft")
POOLED = "pooled"


# --------------------------------------------------  Conditions & seeds
class Condition(NamedTuple):
    amplitude: float
    rate_bpm: float

    @property
    def label(self) -> str:
        return f"{self.amplitude:g}x{self.rate_bpm:g}"

    @property
    def key(self) -> tuple[int, int]:
        return round(self.amplitude * 1e4), round(self.rate_bpm * 100)


def parse_condition(text: str) -> Condition:
    """'0.1x8' -> Condition(0.1, 8.0)."""
    try:
        amp, rate = text.lower().split("x")
        cond = Condition(float(amp), float(rate))
    except ValueError as exc:
        raise ValidationError(f"condition must look like AMPxBPM, got {text!r}") from exc
    if cond.amplitude < 0 or cond.rate_bpm <= 0:
        raise ValidationError(f"condition {text!r} needs amplitude >= 0 and rate > 0")
    return cond


def grid(cfg: ExperimentConfig) -> list[Condition]:
    return [Condition(a, r) for a in cfg.amplitudes for r in cfg.rates_bpm]


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for (seed, keys...)."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _provenance(cfg: ExperimentConfig, seed: int | None = None) -> Provenance:
    return Provenance(cfg.digest, cfg.seed if seed is None else seed)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.csv"


# --------------------------------------------------  generate
def _observe_trace(cfg: ExperimentConfig, profile: MotionProfile, trace: MotionTrace,
                   seed: int) -> pd.DataFrame:
    noise = replace(cfg.noise, seed=seed)
    needle_z = cfg.procedure.needle_start
    ilm_seen, rpe_seen = trace.ilm_z, trace.rpe_z
    if noise.latency_s > 0.0:
        ilm_seen, rpe_seen = sample_layers(profile, layer_time(trace.t, noise))
    samples = [
        observe((float(ilm), float(rpe)), needle_z, cfg.geometry, noise, float(t), cfg.sample_rate_hz)
        for t, ilm, rpe in zip(trace.t, ilm_seen, rpe_seen)
    ]
    return sample_log(samples)


def cmd_generate(cfg: ExperimentConfig, conditions: Sequence[Condition] | None = None) -> Path:
    """Ground-truth traces and segmentation sample logs for each grid condition."""
    out = cfg.out_dir
    rows = []
    for cond in conditions or grid(cfg):
        seed = derive_seed(cfg.seed, *cond.key)
        profile = cfg.profile_for(cond.amplitude, cond.rate_bpm, seed=seed)
        trace = generate_trace(profile, cfg.duration_s, cfg.sample_rate_hz)
        trace_file = Path("traces") / f"trace_{cond.label}.csv"
        samples_file = Path("samples") / f"samples_{cond.label}.csv"
        save_trace(trace, out / trace_file, _provenance(cfg, seed))
        write_csv(_observe_trace(cfg, profile, trace, seed), out / samples_file, _provenance(cfg, seed))
        rows.append((cond.label, cond.amplitude, cond.rate_bpm, len(trace),
                     trace_file.as_posix(), samples_file.as_posix()))
        logger.info("generated %s: %d samples", cond.label, len(trace))
    return write_csv(pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)), _manifest_path(out),
                     _provenance(cfg))


class Dataset(NamedTuple):
    condition: Condition
    t: np.ndarray
    truth: np.ndarray          # ground-truth ILM, mm
    observed: np.ndarray       # gated segmentation ILM, mm


def load_datasets(cfg: ExperimentConfig, conditions: Sequence[Condition] | None = None) -> list[Dataset]:
    manifest, prov = read_csv(_manifest_path(cfg.out_dir))
    if prov.digest != cfg.digest:
        raise ArtifactError(f"manifest digest {prov.digest} does not match config digest {cfg.digest}")
    wanted = {c.label for c in conditions} if conditions else None
    datasets = []
    for row in manifest.itertuples():
        if wanted is not None and row.condition not in wanted:
            continue
        trace, _ = load_trace(cfg.out_dir / row.trace_file)
        samples, _ = read_csv(cfg.out_dir / row.samples_file)
        observed, _ = gated_series(samples["t_s"].to_numpy(float), samples["ilm_px"].to_numpy(float),
                                   cfg.geometry)
        cond = Condition(float(row.amp_mm), float(row.rate_bpm))
        datasets.append(Dataset(cond, trace.t, trace.ilm_z, observed))
    if not datasets:
        raise ArtifactError("no traces found for the requested conditions")
    return datasets


# --------------------------------------------------  train
def model_path(out: Path, name: str) -> Path:
    return out / "models" / f"lstm_{name}.npz"


def cmd_train(cfg: ExperimentConfig, conditions: Sequence[Condition] | None = None) -> list[Path]:
    """One model per condition plus a pooled model over all of them."""
    datasets = load_datasets(cfg, conditions)
    written = []
    for ds in datasets:
        train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, *ds.condition.key))
        logger.info("training %s", ds.condition.label)
        model = lstm_train([ds.observed], train_cfg, digest=cfg.digest)
        written.append(save_model(model, model_path(cfg.out_dir, ds.condition.label)))
    if len(datasets) > 1:
        # thin the pooled windows so it sees as many as one condition model
        pooled_cfg = replace(cfg.train, stride=len(datasets))
        model = lstm_train([ds.observed for ds in datasets], pooled_cfg, digest=cfg.digest)
        written.append(save_model(model, model_path(cfg.out_dir, POOLED)))
    return written


def _find_model(cfg: ExperimentConfig, cond: Condition):
    for name in (cond.label, POOLED):
        path = model_path(cfg.out_dir, name)
        if path.exists():
            model = load_model(path)
            if model.digest and model.digest != cfg.digest:
                logger.warning("model %s was trained under digest %s", path.name, model.digest)
            return model
    raise PredictorError(f"no trained model for {cond.label} under {cfg.out_dir / 'models'}")


def build_predictor(cfg: ExperimentConfig, name: str, cond: Condition) -> Predictor:
    model = _find_model(cfg, cond) if name == "lstm" else None
    return get_predictor(name, model=model, rate_hz=cfg.sample_rate_hz, pad=cfg.fft_pad)


# --------------------------------------------------  evaluate
def cmd_evaluate(cfg: ExperimentConfig, models: Sequence[str] = EVAL_MODELS,
                 conditions: Sequence[Condition] | None = None) -> Path:
    """Held-out one-step predictions against ground truth; grid and comparison tables."""
    unknown = set(models) - set(PREDICTOR_NAMES)
    if unknown:
        raise PredictorError(f"Unknown predictor(s) {sorted(unknown)}")
    out = cfg.out_dir / "reports"
    prov = _provenance(cfg)
    rows = []
    for ds in load_datasets(cfg, conditions):
        cut = int(round(len(ds.t) * cfg.train.train_fraction))
        t, observed, truth = ds.t[cut:], ds.observed[cut:], ds.truth[cut:]
        series = {"t_s": t, "truth_mm": truth, "observed_mm": observed}
        for name in models:
            predictor = build_predictor(cfg, name, ds.condition)
            idx, pred = rolling_predictions(predictor, t, observed)
            report = evaluate(pred, truth[idx])
            rows.append((ds.condition.label, ds.condition.amplitude, ds.condition.rate_bpm, name,
                         report.rmse, report.max_ae, report.mean_ae, report.n, cfg.seed, cfg.digest))
            column = np.full(len(t), np.nan)
            column[idx] = pred
            series[f"{name}_mm"] = column
            logger.info("%s %s: RMSE %.2f um, MaxAE %.2f um", ds.condition.label, name,
                        report.rmse, report.max_ae)
        write_csv(pd.DataFrame(series), out / f"series_{ds.condition.label}.csv", prov)

    grid_df = pd.DataFrame(rows, columns=list(GRID_COLUMNS))
    path = write_csv(grid_df, out / "grid.csv", prov)
    if {"lstm", "fft"} <= set(models):
        write_csv(comparison_table(grid_df), out / "comparison.csv", prov)
    return path


def comparison_table(grid_df: pd.DataFrame) -> pd.DataFrame:
    """LSTM and FFT side by side per condition."""
    wide = grid_df.pivot_table(index=["condition", "amp_mm", "rate_bpm"], columns="model",
                               values=["rmse_um", "maxae_um"], sort=False)
    wide.columns = [f"{model}_{metric}" for metric, model in wide.columns]
    wide = wide.reset_index()
    cols = ["condition", "amp_mm", "rate_bpm", "lstm_rmse_um", "fft_rmse_um",
            "lstm_maxae_um", "fft_maxae_um"]
    return wide[cols]


# --------------------------------------------------  run
def _run_one(cfg: ExperimentConfig, predictor_name: str, cond: Condition, seed: int) -> dict:
    run_dir = cfg.out_dir / "runs" / f"seed_{seed}"
    prov = _provenance(cfg, seed)
    predictor = build_predictor(cfg, predictor_name, cond)
    profile = cfg.profile_for(cond.amplitude, cond.rate_bpm, seed=derive_seed(seed, *cond.key))
    observers = [LoggingObserver(cfg.out_dir / "logs" / "events.log"),
                 EventLogObserver(run_dir / "events.csv", prov)]
    report: ProcedureReport = run_procedure(cfg.setup(profile), predictor, seed, observers)
    write_csv(report.trace, run_dir / "trace.csv", prov)
    summary = {"condition": cond.label, "predictor": predictor_name, **report.summary_row()}
    write_csv(pd.DataFrame([summary]), run_dir / "summary.csv", prov)
    return summary


def cmd_run(cfg: ExperimentConfig, predictor_name: str | None = None,
            condition: Condition | None = None) -> pd.DataFrame:
    """Closed-loop procedure for seeds seed .. seed+seeds-1; returns the batch table."""
    name = (predictor_name or cfg.predictor).lower()
    cond = condition or Condition(cfg.profile.amplitude, cfg.profile.rate_bpm)
    seeds = list(range(cfg.seed, cfg.seed + cfg.seeds))
    if name == "lstm":
        _find_model(cfg, cond)
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(seeds))) as pool:
            summaries = list(pool.map(_run_one, [cfg] * len(seeds), [name] * len(seeds),
                                      [cond] * len(seeds), seeds))
    else:
        summaries = [_run_one(cfg, name, cond, s) for s in seeds]

    batch = pd.DataFrame(summaries)
    out = cfg.out_dir / "runs"
    prov = _provenance(cfg)
    write_csv(batch, out / "batch.csv", prov)
    write_csv(control_precision(batch), out / "control_precision.csv", prov)
    write_csv(batch_summary(batch), out / "batch_summary.csv", prov)
    ok = int(batch["injection_success"].sum())
    logger.info("batch: %d/%d successful injections", ok, len(batch))
    return batch


def control_precision(batch: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for region in ("above_ilm", "inside_retina"):
        for _, run in batch.iterrows():
            if pd.isna(run[f"{region}_rmse_um"]):
                continue
            rows.append((run["seed"], region, *(run[f"{region}_{k}"] for k in CONTROL_COLUMNS[2:])))
    return pd.DataFrame(rows, columns=list(CONTROL_COLUMNS))


def batch_summary(batch: pd.DataFrame) -> pd.DataFrame:
    n = len(batch)
    ok = int(batch["injection_success"].astype(bool).sum())
    return pd.DataFrame([{
        "n_runs": n,
        "n_completed": int((batch["final_phase"] == "completed").sum()),
        "n_success": ok,
        "success_fraction": ok / n if n else float("nan"),
        "rpe_touches": int(batch["rpe_touches"].sum()),
    }])


# --------------------------------------------------  report
PREDICTION_SERIES_COLUMNS = ("source", "condition", "t_s", "truth_mm", "observed_mm", "model",
                             "predicted_mm", "error_um")
TRACKING_SERIES_COLUMNS = ("source", "seed", "t_s", "phase", "target_mm", "needle_mm", "ilm_mm", "rpe_mm")
PHASE_DEPTH_COLUMNS = ("source", "seed", "phase", "t_start_s", "t_end_s", "n",
                       "depth_mean_um", "depth_min_um", "depth_max_um")


def _collect(run_dirs: Iterable[Path], relative: str) -> tuple[list[pd.DataFrame], list[Provenance]]:
    frames, provs = [], []
    for d in run_dirs:
        path = Path(d) / relative
        if path.exists():
            df, prov = read_csv(path)
            frames.append(df)
            provs.append(prov)
    return frames, provs


def _collect_files(run_dirs: Iterable[Path], pattern: str) -> list[tuple[str, Path, pd.DataFrame, Provenance]]:
    found = []
    for d in run_dirs:
        for path in sorted(Path(d).glob(pattern)):
            df, prov = read_csv(path)
            found.append((Path(d).name, path, df, prov))
    return found


def _seed_of(run_dir: Path) -> int:
    return int(run_dir.name.removeprefix("seed_"))


def prediction_series(series: Sequence[tuple[str, Path, pd.DataFrame, Provenance]]) -> pd.DataFrame:
    """Long table of predicted vs true ILM, one row per (condition, model, predicted sample)."""
    frames = []
    for source, path, df, _ in series:
        condition = path.stem.removeprefix("series_")
        for column in [c for c in df.columns if c.endswith("_mm") and c not in ("truth_mm", "observed_mm")]:
            part = df[["t_s", "truth_mm", "observed_mm", column]].dropna(subset=[column])
            part = part.rename(columns={column: "predicted_mm"})
            part.insert(0, "source", source)
            part.insert(1, "condition", condition)
            part.insert(5, "model", column.removesuffix("_mm"))
            part["error_um"] = (part["predicted_mm"] - part["truth_mm"]) * 1000.0
            frames.append(part)
    if not frames:
        return pd.DataFrame(columns=list(PREDICTION_SERIES_COLUMNS))
    return pd.concat(frames, ignore_index=True)[list(PREDICTION_SERIES_COLUMNS)]


def tracking_series(traces: Sequence[tuple[str, Path, pd.DataFrame, Provenance]]) -> pd.DataFrame:
    """Needle, target and layer depths of every closed-loop run, tick by tick."""
    frames = []
    for source, path, df, _ in traces:
        part = df[["t_s", "phase", "target_mm", "needle_mm", "ilm_mm", "rpe_mm"]].copy()
        part.insert(0, "source", source)
        part.insert(1, "seed", _seed_of(path.parent))
        frames.append(part)
    if not frames:
        return pd.DataFrame(columns=list(TRACKING_SERIES_COLUMNS))
    merged = pd.concat(frames, ignore_index=True).sort_values(["source", "seed"], kind="stable")
    return merged.reset_index(drop=True)[list(TRACKING_SERIES_COLUMNS)]


def phase_depths(tracking: pd.DataFrame) -> pd.DataFrame:
    """Needle depth below the ILM (um, negative above it) summarized per run and phase."""
    if tracking.empty:
        return pd.DataFrame(columns=list(PHASE_DEPTH_COLUMNS))
    frame = tracking.assign(depth_um=(tracking["needle_mm"] - tracking["ilm_mm"]) * 1000.0)
    table = frame.groupby(["source", "seed", "phase"], sort=False).agg(
        t_start_s=("t_s", "min"),
        t_end_s=("t_s", "max"),
        n=("t_s", "size"),
        depth_mean_um=("depth_um", "mean"),
        depth_min_um=("depth_um", "min"),
        depth_max_um=("depth_um", "max"),
    )
    return table.reset_index()[list(PHASE_DEPTH_COLUMNS)]


def cmd_report(run_dirs: Sequence[Path | str], out: Path | str) -> list[Path]:
    """
    Merge output directories into the prediction, comparison and control
    tables, plus the plot-ready prediction, tracking and phase-depth series.
    """
    if not run_dirs:
        raise ArtifactError("no run directories given")
    grids, grid_provs = _collect(run_dirs, "reports/grid.csv")
    controls, control_provs = _collect(run_dirs, "runs/control_precision.csv")
    batches, batch_provs = _collect(run_dirs, "runs/batch_summary.csv")
    series = _collect_files(run_dirs, "reports/series_*.csv")
    traces = _collect_files(run_dirs, "runs/seed_*/trace.csv")
    provs = grid_provs + control_provs + batch_provs
    if not provs:
        raise ArtifactError("no grid or run results found in " + ", ".join(map(str, run_dirs)))
    digests = sorted({p.digest for p in provs} | {f[3].digest for f in series + traces})
    if len(digests) > 1:
        raise ArtifactError(f"mixed config digests {digests}; refusing to merge")
    prov = Provenance(digests[0], provs[0].seed)

    out = Path(out)
    written = []
    if grids:
        merged = pd.concat(grids, ignore_index=True)
        missing = set(GRID_COLUMNS) - set(merged.columns)
        if missing:
            raise ArtifactError(f"grid tables lack columns {sorted(missing)}")
        lstm = merged[merged["model"] == "lstm"]
        table = (lstm if len(lstm) else merged).sort_values(["amp_mm", "rate_bpm"])
        written.append(write_csv(table[["amp_mm", "rate_bpm", "model", "rmse_um", "maxae_um"]],
                                 out / "prediction_table.csv", prov))
        if {"lstm", "fft"} <= set(merged["model"]):
            comp = comparison_table(merged).sort_values(["amp_mm", "rate_bpm"])
            extremes = comp.iloc[[0, -1]] if len(comp) > 1 else comp
            written.append(write_csv(extremes, out / "comparison_table.csv", prov))
    if controls:
        merged = pd.concat(controls, ignore_index=True)
        table = merged.groupby("region", sort=False)[list(CONTROL_COLUMNS[2:-1])].mean().reset_index()
        written.append(write_csv(table, out / "control_table.csv", prov))
    if batches:
        merged = pd.concat(batches, ignore_index=True)
        total = merged[["n_runs", "n_completed", "n_success", "rpe_touches"]].sum()
        total["success_fraction"] = total["n_success"] / total["n_runs"] if total["n_runs"] else np.nan
        written.append(write_csv(total.to_frame().T, out / "batch_table.csv", prov))
    if series:
        written.append(write_csv(prediction_series(series), out / "prediction_series.csv", prov))
    if traces:
        tracking = tracking_series(traces)
        written.append(write_csv(tracking, out / "tracking_series.csv", prov))
        written.append(write_csv(phase_depths(tracking), out / "phase_depths.csv", prov))
    return written
