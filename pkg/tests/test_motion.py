import math

import numpy as np
import pytest

from app.artifacts import Provenance
from app.exceptions import ValidationError
from app.motion import (
    DisturbanceSpec,
    EyePhantom,
    MotionProfile,
    bpm_to_hz,
    generate_trace,
    ground_truth_at,
    load_trace,
    sample_layers,
    save_trace,
)


@pytest.mark.parametrize("bpm,hz", [(8, 8 / 60), (9, 0.15), (10, 1 / 6), (60, 1.0)])
def test_bpm_to_hz(bpm, hz):
    assert bpm_to_hz(bpm) == pytest.approx(hz)


@pytest.mark.parametrize("bad", [0, -8, float("nan"), float("inf")])
def test_bpm_to_hz_rejects(bad):
    with pytest.raises(ValidationError):
        bpm_to_hz(bad)


def test_pure_sine_matches_closed_form():
    profile = MotionProfile(amplitude=0.1, rate_bpm=8)
    for t in (0.0, 1.0, 3.75, 100.0):
        ilm, rpe = ground_truth_at(profile, t)
        expected = 2.2 + 0.1 * math.sin(2 * math.pi * (8 / 60) * t)
        assert ilm == pytest.approx(expected, abs=1e-12)
        assert rpe - ilm == pytest.approx(0.25)


def test_zero_amplitude_is_constant():
    trace = generate_trace(MotionProfile(amplitude=0.0, rate_bpm=8), 60, 4)
    assert np.all(trace.ilm_z == 2.2)


def test_trace_length_grid_arithmetic():
    trace = generate_trace(MotionProfile(0.1, 8), 1800, 4)
    assert len(trace) == 7201
    assert trace.t[-1] == pytest.approx(1800.0)


def test_disturbed_trace_stays_in_band():
    profile = MotionProfile(0.15, 10, disturbance=DisturbanceSpec.mild(seed=3))
    trace = generate_trace(profile, 1800, 4)
    # amplitude * (1 + am) plus the wander span
    assert np.max(np.abs(trace.ilm_z - 2.2)) <= 0.15 * 1.1 + 0.05 + 1e-12
    assert np.all(trace.rpe_z > trace.ilm_z)


def test_trace_is_deterministic():
    profile = MotionProfile(0.1, 9, disturbance=DisturbanceSpec(noise_sd=0.001, seed=4, am_depth=0.1))
    a = generate_trace(profile, 30, 4)
    b = generate_trace(profile, 30, 4)
    np.testing.assert_array_equal(a.ilm_z, b.ilm_z)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"amplitude": -0.1, "rate_bpm": 8},
        {"amplitude": 0.1, "rate_bpm": 0},
        {"amplitude": 0.1, "rate_bpm": 8, "retina_thickness": 0},
        {"amplitude": 0.1, "rate_bpm": 8, "deformation": 0.25},
        {"amplitude": float("nan"), "rate_bpm": 8},
    ],
)
def test_profile_validation(kwargs):
    with pytest.raises(ValidationError):
        MotionProfile(**kwargs)


@pytest.mark.parametrize("kwargs", [{"am_depth": 1.0}, {"drift_rate": -1}, {"seed": -1}])
def test_disturbance_validation(kwargs):
    with pytest.raises(ValidationError):
        DisturbanceSpec(**kwargs)


def test_negative_time_and_duration_rejected():
    profile = MotionProfile(0.1, 8)
    with pytest.raises(ValidationError):
        ground_truth_at(profile, -1.0)
    with pytest.raises(ValidationError):
        generate_trace(profile, 0, 4)


def test_save_and_load_trace(tmp_path):
    trace = generate_trace(MotionProfile(0.05, 8), 10, 4)
    path = save_trace(trace, tmp_path / "trace.csv", Provenance("abc", 3))
    loaded, prov = load_trace(path)
    assert prov.digest == "abc" and prov.seed == 3
    np.testing.assert_allclose(loaded.ilm_z, trace.ilm_z, rtol=1e-8)


def test_phantom_deformation_latches_on_puncture():
    phantom = EyePhantom(MotionProfile(0.0, 8, deformation=0.03))
    assert phantom.layers_at(1.0, needle_z=1.5) == pytest.approx((2.2, 2.45))
    assert phantom.punctured_at is None
    ilm, rpe = phantom.layers_at(2.0, needle_z=2.3)
    assert phantom.punctured_at == 2.0
    assert ilm == pytest.approx(2.23)
    assert rpe == pytest.approx(2.45)
    # stays deformed after the needle backs out
    assert phantom.layers_at(3.0, needle_z=1.0)[0] == pytest.approx(2.23)
    phantom.reset()
    assert phantom.layers_at(4.0)[0] == pytest.approx(2.2)


def test_phantom_layers_seen_before_puncture_are_undeformed():
    phantom = EyePhantom(MotionProfile(0.0, 8, deformation=0.03))
    phantom.layers_at(2.0, needle_z=2.3)
    assert phantom.layers_seen(1.8)[0] == pytest.approx(2.2)
    assert phantom.layers_seen(2.5)[0] == pytest.approx(2.23)


def test_layers_seen_never_latch():
    phantom = EyePhantom(MotionProfile(0.1, 8, deformation=0.03))
    phantom.layers_seen(1.0)
    assert phantom.punctured_at is None


def test_sample_layers_matches_pointwise():
    profile = MotionProfile(0.1, 9, disturbance=DisturbanceSpec.mild(seed=2))
    t = np.array([0.0, 0.3, 7.25, 100.0])
    ilm, rpe = sample_layers(profile, t)
    for ti, a, b in zip(t, ilm, rpe):
        assert (a, b) == pytest.approx(ground_truth_at(profile, ti))


def test_sample_layers_rejects_negative_time():
    with pytest.raises(ValidationError):
        sample_layers(MotionProfile(0.1, 8), np.array([0.0, -0.25]))
