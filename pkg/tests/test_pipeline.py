import os

import numpy as np
import pytest

from rotorsense.batching import BatchPolicy, StopReason, grow_batch
from rotorsense.config import PipelineConfig
from rotorsense.dynamics import rpm_to_rad_s
from rotorsense.errors import ConfigError
from rotorsense.events import EventBundle, Events, SensorGeometry, slice_bundles, write_events
from rotorsense.motion import MotionParams, SpeedEstimate
from rotorsense.pipeline import (
    estimate_track,
    preprocess_stream,
    read_speed_csv,
    read_truth_rpm_csv,
    run_pipeline,
    write_speed_csv,
    write_truth_rpm_csv,
)
from rotorsense.sim import ConstantSpeed, NO_NOISE, NoiseSpec, PropellerSpec, StepSpeed, simulate_propellers
from conftest import make_spec


class TestArtifactRoundTrips:
    def test_speed_csv(self, tmp_path):
        estimates = [
            SpeedEstimate(prop_id=0, t_ref_us=1000, omega_rad_s=314.159, objective_value=1.5e12, n_events_used=400),
            SpeedEstimate(prop_id=1, t_ref_us=2000, omega_rad_s=523.6, objective_value=2.5e9, n_events_used=300),
        ]
        path = str(tmp_path / "speeds.csv")
        write_speed_csv(path, estimates)
        rows = read_speed_csv(path)
        assert rows.shape == (2, 4)
        assert rows[0, 2] == pytest.approx(estimates[0].rpm)
        assert rows[1, 1] == 1

    def test_truth_rpm_csv_carries_centers(self, tmp_path):
        _, truth = simulate_propellers([make_spec()], NO_NOISE, duration_us=2_000, tick_us=50, seed=0)
        path = str(tmp_path / "truth.csv")
        write_truth_rpm_csv(path, truth, [(60.0, 60.0)])
        rows, centers = read_truth_rpm_csv(path)
        assert centers == [(60.0, 60.0)]
        assert rows.shape[0] == truth.times_us.size
        assert np.allclose(rows[:, 2], 3000.0)


class TestPreprocessStream:
    def test_two_props_keep_identity_across_windows(self):
        specs = [
            make_spec(center=(60.0, 60.0), phase=0.1),
            make_spec(center=(200.0, 160.0), phase=1.3),
        ]
        events, _ = simulate_propellers(
            specs, NO_NOISE, duration_us=60_000, tick_us=50, seed=2, geometry=SensorGeometry(280, 220)
        )
        cfg = PipelineConfig(window_us=20_000, k_props=2, filter_enabled=False)
        tracked = preprocess_stream(events, cfg)
        assert len(tracked.warp_centers) == 2
        for prop, true_center in enumerate(sorted([(60.0, 60.0), (200.0, 160.0)], key=lambda c: (c[1], c[0]))):
            wc = tracked.warp_centers[prop]
            assert np.hypot(wc[0] - true_center[0], wc[1] - true_center[1]) < 2.0
            track = tracked.track_events(prop)
            # all of this track's events stay near its rotor across every window
            r = np.hypot(track.x.astype(float) - true_center[0], track.y.astype(float) - true_center[1])
            assert float(r.max()) < 45.0

    def test_empty_stream(self):
        tracked = preprocess_stream(Events.empty(), PipelineConfig())
        assert len(tracked.events) == 0
        assert tracked.centroids == []


class TestEstimateTrack:
    def test_tracks_through_speed_step(self):
        """The loop re-acquires after a consistency stop and follows a
        3000 -> 4500 RPM step even though each batch's bracket is
        confined around the previous estimate."""
        spec = PropellerSpec(
            center=(50.0, 50.0), n_blades=2, blade_length=30.0, blade_width=5.0,
            initial_phase=0.2, speed_profile=StepSpeed([(0, 3000.0), (40_000, 4500.0)]),
        )
        events, _ = simulate_propellers([spec], NO_NOISE, duration_us=80_000, tick_us=30, seed=3)
        cfg = PipelineConfig(bracket_rpm_lo=1000, bracket_rpm_hi=6000, dt_us=2000)
        track = estimate_track(events, (50.0, 50.0), cfg)
        assert len(track.estimates) >= 4
        before = [e.rpm for e in track.estimates if e.t_ref_us + 16_000 <= 40_000]
        after = [e.rpm for e in track.estimates if e.t_ref_us >= 40_000]
        assert before and after
        assert np.allclose(before, 3000.0, rtol=0.01)
        assert np.allclose(after, 4500.0, rtol=0.01)
        assert StopReason.CONSISTENCY in track.stop_reasons

    def test_gap_in_stream_is_survived(self):
        a, _ = simulate_propellers([make_spec(phase=0.8)], NO_NOISE, duration_us=20_000, tick_us=50, seed=1)
        b, _ = simulate_propellers([make_spec(phase=0.8)], NO_NOISE, duration_us=20_000, tick_us=50, seed=1)
        shifted = Events(b.t + np.uint64(60_000), b.x, b.y, b.p)
        joined = Events(
            np.concatenate([a.t, shifted.t]),
            np.concatenate([a.x, shifted.x]),
            np.concatenate([a.y, shifted.y]),
            np.concatenate([a.p, shifted.p]),
        )
        cfg = PipelineConfig(bracket_rpm_lo=1000, bracket_rpm_hi=6000, dt_us=2000)
        track = estimate_track(joined, (60.0, 60.0), cfg)
        rpms = np.array([e.rpm for e in track.estimates])
        assert rpms.size >= 3
        assert np.allclose(rpms, 3000.0, rtol=0.01)

    def test_empty_candidate_bundle_stops_growth(self):
        events, _ = simulate_propellers([make_spec()], NO_NOISE, duration_us=10_000, tick_us=50, seed=1)
        bundles = slice_bundles(events, 2000)
        gap = EventBundle(events=Events.empty(), t_start=bundles[2].t_start, t_end=bundles[2].t_end)
        with_gap = bundles[:2] + [gap] + bundles[3:]
        policy = BatchPolicy(dt_us=2000, max_bundles=8)
        grown = grow_batch(with_gap, policy, rpm_to_rad_s(3000), (60.0, 60.0))
        assert grown.reason is StopReason.CONSISTENCY
        assert grown.next_index == 2


class TestRunPipelineFromFile:
    def test_stage_named_in_error(self, tmp_path):
        from rotorsense.errors import DataError

        cfg = PipelineConfig(input=str(tmp_path / "missing.bin"))
        with pytest.raises(DataError, match="stage simulate"):
            run_pipeline(cfg, str(tmp_path / "run"))

    def test_ingest_path(self, tmp_path):
        events, truth = simulate_propellers(
            [make_spec()], NoiseSpec(background_rate=2.0), duration_us=40_000, tick_us=50, seed=4,
            geometry=SensorGeometry(130, 130),
        )
        path = str(tmp_path / "in.bin")
        write_events(events, SensorGeometry(130, 130), path, "bin")
        cfg = PipelineConfig(
            seed=4, input=path, window_us=20_000, k_props=1,
            bracket_rpm_lo=1000, bracket_rpm_hi=6000,
        )
        result = run_pipeline(cfg, str(tmp_path / "run"))
        assert any(m["metric"] == "n_events" and m["value"] == len(events) for m in result.metrics)
        assert result.estimates  # speeds produced without a truth sidecar
        assert not any(m["metric"] == "rmae_percent" for m in result.metrics)


class TestMotionParams:
    def test_image_axis_rates_pinned_to_zero(self):
        MotionParams(omega_t=10.0)
        with pytest.raises(ConfigError):
            MotionParams(omega_t=10.0, omega_x=0.1)
