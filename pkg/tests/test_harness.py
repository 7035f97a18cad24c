import numpy as np
import pandas as pd
import pytest

from app.artifacts import Provenance, read_csv, write_csv
from app.config import ExperimentConfig
from app.exceptions import ArtifactError, PredictorError, ValidationError
from app.harness import (
    GRID_COLUMNS,
    PHASE_DEPTH_COLUMNS,
    PREDICTION_SERIES_COLUMNS,
    TRACKING_SERIES_COLUMNS,
    Condition,
    cmd_evaluate,
    cmd_generate,
    cmd_report,
    cmd_run,
    cmd_train,
    derive_seed,
    grid,
    load_datasets,
    model_path,
    parse_condition,
)
from app.motion import generate_trace
from app.observation import mm_to_px


def _cfg(out, **extra):
    environ = {"RUN_OUT_DIR": str(out), "RUN_DURATION_S": "60", "RUN_AMPLITUDES_MM": "0.1",
               "RUN_RATES_BPM": "8,10"}
    environ.update({k: str(v) for k, v in extra.items()})
    return ExperimentConfig.load(None, environ)


# -----------------------------------------------------------------------------
# Conditions and seeds
# -----------------------------------------------------------------------------
@pytest.mark.parametrize(
    "text,expected", [("0.1x8", (0.1, 8.0)), ("0.05X10", (0.05, 10.0)), ("0x9", (0.0, 9.0))]
)
def test_parse_condition(text, expected):
    assert parse_condition(text) == expected


@pytest.mark.parametrize("text", ["abc", "0.1x", "1x2x3", "-0.1x8", "0.1x0"])
def test_parse_condition_rejects(text):
    with pytest.raises(ValidationError):
        parse_condition(text)


def test_condition_label():
    assert Condition(0.1, 8.0).label == "0.1x8"
    assert Condition(0.05, 10.0).label == "0.05x10"


def test_grid_is_cartesian():
    cfg = ExperimentConfig.load(None, {})
    assert len(grid(cfg)) == 9
    assert grid(cfg)[0] == Condition(0.05, 8.0)


def test_derive_seed():
    assert derive_seed(0, 1000, 800) == derive_seed(0, 1000, 800)
    assert derive_seed(0, 1000, 800) != derive_seed(1, 1000, 800)
    assert derive_seed(0, 1000, 800) != derive_seed(0, 1000, 900)


# -----------------------------------------------------------------------------
# generate
# -----------------------------------------------------------------------------
def test_generate_writes_manifest_and_files(tmp_path):
    cfg = _cfg(tmp_path)
    manifest_path = cmd_generate(cfg)
    manifest, prov = read_csv(manifest_path)
    assert prov.digest == cfg.digest
    assert manifest["condition"].tolist() == ["0.1x8", "0.1x10"]
    assert manifest["n_samples"].tolist() == [241, 241]
    samples, _ = read_csv(tmp_path / "samples" / "samples_0.1x8.csv")
    assert list(samples.columns) == ["t_s", "ilm_px", "rpe_px", "needle_px", "valid_mask"]


def test_generate_is_byte_identical(tmp_path):
    a = _cfg(tmp_path / "a")
    b = _cfg(tmp_path / "b")
    cmd_generate(a, [Condition(0.1, 8.0)])
    cmd_generate(b, [Condition(0.1, 8.0)])
    for rel in ("manifest.csv", "traces/trace_0.1x8.csv", "samples/samples_0.1x8.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_applies_segmentation_latency(tmp_path):
    cfg = _cfg(tmp_path, OBS_SD_PX=0, OBS_NEEDLE_SD_PX=0, OBS_OUTLIER_PROB=0, OBS_LATENCY_S=0.5)
    cond = Condition(0.1, 8.0)
    cmd_generate(cfg, [cond])
    profile = cfg.profile_for(0.1, 8.0, seed=derive_seed(cfg.seed, *cond.key))
    truth = generate_trace(profile, cfg.duration_s, cfg.sample_rate_hz).ilm_z
    samples, _ = read_csv(tmp_path / "samples" / "samples_0.1x8.csv")
    # two samples behind at 4 Hz
    assert samples["ilm_px"].tolist()[2:] == [mm_to_px(z, cfg.geometry) for z in truth[:-2]]
    assert samples["ilm_px"].iloc[0] == samples["ilm_px"].iloc[2] == mm_to_px(truth[0], cfg.geometry)


def test_load_datasets_checks_digest(tmp_path):
    cmd_generate(_cfg(tmp_path), [Condition(0.1, 8.0)])
    with pytest.raises(ArtifactError):
        load_datasets(_cfg(tmp_path, CTRL_K_V=12))


def test_load_datasets_filters_conditions(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_generate(cfg)
    (ds,) = load_datasets(cfg, [Condition(0.1, 10.0)])
    assert ds.condition == Condition(0.1, 10.0)
    assert len(ds.observed) == len(ds.truth) == 241
    assert not np.isnan(ds.observed).any()
    with pytest.raises(ArtifactError):
        load_datasets(cfg, [Condition(0.15, 9.0)])


# -----------------------------------------------------------------------------
# evaluate / train
# -----------------------------------------------------------------------------
def test_evaluate_fft_only(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_generate(cfg, [Condition(0.1, 8.0)])
    grid_path = cmd_evaluate(cfg, ("fft",), [Condition(0.1, 8.0)])
    table, _ = read_csv(grid_path)
    assert tuple(table.columns) == GRID_COLUMNS
    assert table["model"].tolist() == ["fft"]
    assert table["n"].iloc[0] == 48 - 20
    assert not (tmp_path / "reports" / "comparison.csv").exists()
    series, _ = read_csv(tmp_path / "reports" / "series_0.1x8.csv")
    assert "fft_mm" in series.columns


def test_evaluate_lstm_without_model(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_generate(cfg, [Condition(0.1, 8.0)])
    with pytest.raises(PredictorError):
        cmd_evaluate(cfg, ("lstm",))


def test_evaluate_unknown_model(tmp_path):
    with pytest.raises(PredictorError):
        cmd_evaluate(_cfg(tmp_path), ("arima",))


@pytest.mark.slow
def test_train_then_compare(tmp_path):
    cfg = _cfg(tmp_path, PRED_EPOCHS=3, PRED_HIDDEN_SIZE=4, PRED_BATCH_SIZE=64)
    cmd_generate(cfg)
    written = cmd_train(cfg)
    assert written == [model_path(tmp_path, "0.1x8"), model_path(tmp_path, "0.1x10"),
                       model_path(tmp_path, "pooled")]
    cmd_evaluate(cfg)
    comparison, _ = read_csv(tmp_path / "reports" / "comparison.csv")
    assert comparison["condition"].tolist() == ["0.1x8", "0.1x10"]
    assert {"lstm_rmse_um", "fft_rmse_um"} <= set(comparison.columns)


# -----------------------------------------------------------------------------
# run
# -----------------------------------------------------------------------------
def test_run_hold_batch(tmp_path):
    cfg = _cfg(tmp_path, RUN_SEEDS=2, OBS_SD_PX=0, OBS_NEEDLE_SD_PX=0, OBS_OUTLIER_PROB=0,
               OBS_LATENCY_S=0, MOTION_DRIFT_RATE=0, MOTION_AM_DEPTH=0)
    batch = cmd_run(cfg, "hold")
    assert batch["seed"].tolist() == [0, 1]
    for seed in (0, 1):
        for name in ("trace.csv", "events.csv", "summary.csv"):
            assert (tmp_path / "runs" / f"seed_{seed}" / name).exists()
    summary, _ = read_csv(tmp_path / "runs" / "batch_summary.csv")
    assert summary["n_runs"].iloc[0] == 2
    assert summary["success_fraction"].iloc[0] == batch["injection_success"].mean()
    assert (tmp_path / "logs" / "events.log").exists()


def test_run_lstm_needs_model(tmp_path):
    with pytest.raises(PredictorError):
        cmd_run(_cfg(tmp_path), "lstm")


# -----------------------------------------------------------------------------
# report
# -----------------------------------------------------------------------------
def _grid_file(root, digest, rows):
    df = pd.DataFrame(rows, columns=list(GRID_COLUMNS))
    return write_csv(df, root / "reports" / "grid.csv", Provenance(digest, 0))


def _grid_rows(digest):
    rows = []
    for amp, rate in ((0.15, 10.0), (0.05, 8.0)):
        for model, rmse in (("lstm", 5.0), ("fft", 20.0)):
            rows.append((f"{amp:g}x{rate:g}", amp, rate, model, rmse * amp * 10, 3 * rmse, rmse, 100, 0, digest))
    return rows


def test_report_tables(tmp_path):
    _grid_file(tmp_path / "r1", "abc", _grid_rows("abc"))
    written = cmd_report([tmp_path / "r1"], tmp_path / "report")
    assert [p.name for p in written] == ["prediction_table.csv", "comparison_table.csv"]
    prediction, prov = read_csv(tmp_path / "report" / "prediction_table.csv")
    assert prov.digest == "abc"
    assert prediction["model"].unique().tolist() == ["lstm"]
    assert prediction["amp_mm"].tolist() == [0.05, 0.15]
    comparison, _ = read_csv(tmp_path / "report" / "comparison_table.csv")
    assert comparison["condition"].tolist() == ["0.05x8", "0.15x10"]


def test_report_series(tmp_path):
    cfg = _cfg(tmp_path, RUN_SEEDS=2, OBS_SD_PX=0, OBS_NEEDLE_SD_PX=0, OBS_OUTLIER_PROB=0,
               OBS_LATENCY_S=0, MOTION_DRIFT_RATE=0, MOTION_AM_DEPTH=0)
    cond = Condition(0.1, 8.0)
    cmd_generate(cfg, [cond])
    cmd_evaluate(cfg, ("fft",), [cond])
    cmd_run(cfg, "hold")
    written = {p.name for p in cmd_report([tmp_path], tmp_path / "report")}
    assert {"prediction_series.csv", "tracking_series.csv", "phase_depths.csv"} <= written

    grid_table, _ = read_csv(tmp_path / "reports" / "grid.csv")
    prediction, prov = read_csv(tmp_path / "report" / "prediction_series.csv")
    assert prov.digest == cfg.digest
    assert tuple(prediction.columns) == PREDICTION_SERIES_COLUMNS
    assert len(prediction) == grid_table["n"].sum()
    assert set(prediction["model"]) == {"fft"}
    np.testing.assert_allclose(prediction["error_um"],
                               (prediction["predicted_mm"] - prediction["truth_mm"]) * 1000.0, rtol=1e-6)

    traces = [read_csv(tmp_path / "runs" / f"seed_{s}" / "trace.csv")[0] for s in (0, 1)]
    tracking, _ = read_csv(tmp_path / "report" / "tracking_series.csv")
    assert tuple(tracking.columns) == TRACKING_SERIES_COLUMNS
    assert len(tracking) == sum(len(t) for t in traces)
    assert tracking["seed"].unique().tolist() == [0, 1]

    depths, _ = read_csv(tmp_path / "report" / "phase_depths.csv")
    assert tuple(depths.columns) == PHASE_DEPTH_COLUMNS
    assert len(depths) == sum(t["phase"].nunique() for t in traces)
    assert depths["n"].sum() == len(tracking)
    assert (depths["depth_min_um"] <= depths["depth_max_um"]).all()


def test_report_rejects_mixed_digests(tmp_path):
    _grid_file(tmp_path / "r1", "abc", _grid_rows("abc"))
    _grid_file(tmp_path / "r2", "def", _grid_rows("def"))
    with pytest.raises(ArtifactError):
        cmd_report([tmp_path / "r1", tmp_path / "r2"], tmp_path / "report")


def test_report_needs_results(tmp_path):
    with pytest.raises(ArtifactError):
        cmd_report([], tmp_path / "report")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ArtifactError):
        cmd_report([tmp_path / "empty"], tmp_path / "report")


# -----------------------------------------------------------------------------
# Full-size checks
# -----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def full_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    cfg = ExperimentConfig.load(None, {"RUN_OUT_DIR": str(out)})
    cmd_generate(cfg)
    cmd_train(cfg)
    table, _ = read_csv(cmd_evaluate(cfg))
    return table


def _cells(table, model, metric):
    rows = table[table["model"] == model]
    return rows.pivot(index="amp_mm", columns="rate_bpm", values=metric).sort_index().sort_index(axis=1)


@pytest.mark.slow
def test_lstm_error_grows_with_amplitude_and_rate(full_grid):
    rmse = _cells(full_grid, "lstm", "rmse_um").to_numpy()
    assert rmse.shape == (3, 3)
    assert (np.diff(rmse, axis=0) > 0).all()
    assert (np.diff(rmse, axis=1) > 0).all()


@pytest.mark.slow
def test_lstm_error_band_at_smallest_motion(full_grid):
    cell = full_grid[(full_grid["model"] == "lstm") & (full_grid["condition"] == "0.05x8")].iloc[0]
    assert cell["rmse_um"] <= 12.0
    assert cell["maxae_um"] <= 40.0


@pytest.mark.slow
@pytest.mark.parametrize("metric", ["rmse_um", "maxae_um"])
def test_lstm_beats_fft_in_every_cell(full_grid, metric):
    lstm = _cells(full_grid, "lstm", metric).to_numpy()
    fft = _cells(full_grid, "fft", metric).to_numpy()
    assert (lstm < fft).all()


@pytest.mark.slow
def test_hundred_seed_batch_is_safe(tmp_path):
    cfg = _cfg(tmp_path, RUN_SEEDS=100, RUN_WORKERS=4)
    batch = cmd_run(cfg, "fft")
    assert len(batch) == 100
    for run in batch.itertuples():
        trace, _ = read_csv(tmp_path / "runs" / f"seed_{run.seed}" / "trace.csv")
        if run.injection_success:
            assert run.rpe_touches == 0
            assert (trace["needle_mm"] < trace["rpe_mm"]).all()
        if run.final_phase == "aborted":
            assert trace["v_mm_s"].iloc[-1] == 0.0


@pytest.mark.slow
def test_pipeline_outputs_are_byte_identical(tmp_path):
    def pipeline(out):
        cfg = _cfg(out, RUN_DURATION_S=120, RUN_RATES_BPM=8, RUN_SEEDS=2,
                   PRED_EPOCHS=5, PRED_HIDDEN_SIZE=4, PRED_BATCH_SIZE=64)
        cmd_generate(cfg)
        cmd_train(cfg)
        cmd_evaluate(cfg)
        cmd_run(cfg, "lstm")
        cmd_report([out], out / "report")
        return sorted(p.relative_to(out) for p in out.rglob("*.csv"))

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    assert a == b
    assert len(a) > 10
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
