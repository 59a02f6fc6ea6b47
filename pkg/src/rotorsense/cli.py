"""Command-line interface.

Subcommands: simulate, preprocess, estimate, train-command,
infer-command, fuse, eval, pipeline, bench. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical/degenerate error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .commands import CommandSample, load_model, predict_command, resample_zero_order_hold, save_model, train_command_model
from .config import PipelineConfig, parse_scenario
from .dynamics import rpm_to_rad_s
from .errors import ConfigError, DataError, EstimationError, NumericalError, RotorSenseError
from .events import read_events, write_events
from .fusion import KinematicPredictor, run_fusion
from .metrics import localization_error, rmae
from . import pipeline as pl
from .sim import generate_command_dataset, simulate_flight, simulate_propellers

LOG = logging.getLogger("rotorsense")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    fmt = args.format
    scenario_hash = hashlib.sha256(open(args.scenario, "rb").read()).hexdigest()
    artifacts = []
    if scenario.mode == "propellers":
        events, truth = simulate_propellers(
            scenario.specs, scenario.noise, scenario.duration_us, scenario.tick_us,
            seed=scenario.seed, geometry=scenario.geometry,
        )
        geometry = scenario.geometry or events.infer_geometry()
        events_path = os.path.join(args.out, f"events.{fmt}")
        write_events(events, geometry, events_path, fmt)
        truth_path = os.path.join(args.out, "truth_rpm.csv")
        pl.write_truth_rpm_csv(truth_path, truth, [s.center for s in scenario.specs])
        artifacts += [events_path, truth_path]
        print(f"simulated {len(events)} events over {scenario.duration_us} us -> {args.out}")
    else:
        flight = simulate_flight(
            scenario.script, scenario.drone, scenario.noise, scenario.duration_us,
            seed=scenario.seed, render_events=scenario.render_events, geometry=scenario.geometry,
        )
        if scenario.render_events and len(flight.events):
            geometry = scenario.geometry or flight.events.infer_geometry()
            events_path = os.path.join(args.out, f"events.{fmt}")
            write_events(flight.events, geometry, events_path, fmt)
            artifacts.append(events_path)
        truth = flight.truth
        states = np.hstack([truth.positions, truth.velocities])
        labels = [truth.command_labels[int(c)] for c in truth.command_ids]
        pl.write_state_csv(
            os.path.join(args.out, "truth_state.csv"), truth.times_us, states,
            extra={"command": np.array(labels, dtype=object)},
        )
        pl.write_xyz_csv(os.path.join(args.out, "gps.csv"), flight.gps)
        rows = []
        for prop in range(flight.rpm_traces.shape[0]):
            for k in range(truth.times_us.size):
                rows.append((int(truth.times_us[k]), prop, float(flight.rpm_traces[prop, k])))
        with open(os.path.join(args.out, "speed_traces.csv"), "w", newline="\n") as fh:
            fh.write("t,prop_id,rpm\n")
            for t_us, prop, value in rows:
                fh.write(f"{t_us},{prop},{value!r}\n")
        pl.write_command_csv(
            os.path.join(args.out, "commands.csv"),
            [(int(t), truth.command_labels[int(c)]) for t, c in zip(truth.times_us, truth.command_ids)],
        )
        artifacts += [
            os.path.join(args.out, name)
            for name in ("truth_state.csv", "gps.csv", "speed_traces.csv", "commands.csv")
        ]
        print(f"simulated flight ({len(flight.gps)} GPS fixes) -> {args.out}")
    pl.write_manifest(os.path.join(args.out, "manifest.json"), scenario_hash, scenario.seed, artifacts)
    return EXIT_OK


def _cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.window_us:
        cfg.window_us = args.window_us
    if args.bin:
        cfg.bin_size = args.bin
    if args.k:
        cfg.k_props = args.k
    if args.count_ratio is not None:
        cfg.count_ratio = args.count_ratio
    if args.polarity_band:
        lo, hi = (float(v) for v in args.polarity_band.split(","))
        cfg.polarity_lo, cfg.polarity_hi = lo, hi
    cfg.validate()
    events, geometry = read_events(args.input, args.format)
    tracked = pl.preprocess_stream(events, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_events(tracked.events, geometry, os.path.join(args.out, f"filtered.{args.format}"), args.format)
    with open(os.path.join(args.out, "assignments.csv"), "w", newline="\n") as fh:
        fh.write("event_index,prop_id\n")
        for idx, prop in enumerate(tracked.assignments):
            fh.write(f"{idx},{int(prop)}\n")
    with open(os.path.join(args.out, "tracks.csv"), "w", newline="\n") as fh:
        fh.write("prop_id,centroid_x,centroid_y,n_events\n")
        for prop, centroid in enumerate(tracked.centroids):
            n = int((tracked.assignments == prop).sum())
            fh.write(f"{prop},{centroid[0]!r},{centroid[1]!r},{n}\n")
    pl.write_manifest(
        os.path.join(args.out, "manifest.json"), cfg.content_hash(), cfg.seed,
        [os.path.join(args.out, f"filtered.{args.format}"), os.path.join(args.out, "assignments.csv"),
         os.path.join(args.out, "tracks.csv")],
    )
    print(f"kept {len(tracked.events)}/{len(events)} events in {len(tracked.centroids)} tracks -> {args.out}")
    return EXIT_OK


def _cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.bracket_rpm:
        lo, hi = (float(v) for v in args.bracket_rpm.split(","))
        cfg.bracket_rpm_lo, cfg.bracket_rpm_hi = lo, hi
    if args.grid:
        cfg.n_grid = args.grid
    if args.tol is not None:
        cfg.tol_rpm = args.tol
    if args.epsilon is not None:
        cfg.epsilon = args.epsilon
    if args.dt_us:
        cfg.dt_us = args.dt_us
    if args.delta is not None:
        cfg.delta = args.delta
    if args.beta:
        cfg.beta = args.beta
    if args.sample_fraction is not None:
        cfg.sample_fraction = args.sample_fraction
    if args.st_ratio is not None:
        cfg.time_radius_us = cfg.space_radius_px * args.st_ratio
    cfg.validate()
    events, _ = read_events(args.input, args.format)
    tracked = pl.preprocess_stream(events, cfg)
    estimates = []
    for prop, center in enumerate(tracked.warp_centers):
        track = pl.estimate_track(tracked.track_events(prop), center, cfg, prop_id=prop)
        estimates.extend(track.estimates)
    estimates.sort(key=lambda e: (e.t_ref_us, e.prop_id))
    os.makedirs(args.out, exist_ok=True)
    speeds_path = os.path.join(args.out, "speeds.csv")
    pl.write_speed_csv(speeds_path, estimates)
    pl.write_manifest(os.path.join(args.out, "manifest.json"), cfg.content_hash(), cfg.seed, [speeds_path])
    print(f"estimated {len(estimates)} speed points -> {args.out}/speeds.csv")
    return EXIT_OK


def _cmd_train_command(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    from .sim import DroneSpec

    drone = DroneSpec(hover_rpm=cfg.hover_rpm, delta_rpm=args.delta_rpm, rpm_jitter=args.jitter_rpm)
    window = int(cfg.window_ms * cfg.resample_hz / 1000.0)
    raw = generate_command_dataset(args.samples_per_class, drone, window, cfg.resample_hz, cfg.seed)
    samples = [CommandSample(speeds_sq=x, label=lab) for x, lab in raw]
    model, accuracies = train_command_model(
        samples, k_folds=cfg.svm_folds, lambda_reg=cfg.svm_lambda, epochs=cfg.svm_epochs,
        seed=cfg.seed, rate_hz=cfg.resample_hz, cutoff_hz=cfg.cutoff_hz,
    )
    save_model(model, args.model)
    pl.write_manifest(args.model + ".manifest.json", cfg.content_hash(), cfg.seed, [args.model])
    print(f"fold accuracies: {' '.join(f'{a:.3f}' for a in accuracies)} (mean {accuracies.mean():.3f})")
    print(f"model -> {args.model}")
    return EXIT_OK


def _cmd_infer_command(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    speeds = pl.read_speed_csv(args.input)
    if speeds.shape[0] == 0:
        raise DataError(f"{args.input}: no speed rows")
    window_us = args.window_ms * 1000.0
    t_end = float(speeds[:, 0].max())
    t_lo = float(speeds[:, 0].min())
    rows = []
    t_cursor = t_lo + window_us
    while t_cursor <= t_end + 1:
        window_rows = speeds[(speeds[:, 0] >= t_cursor - window_us) & (speeds[:, 0] <= t_cursor)]
        channels = []
        for prop in range(model.n_props):
            prop_rows = window_rows[window_rows[:, 1] == prop]
            if prop_rows.shape[0] == 0:
                break
            trace = resample_zero_order_hold(
                prop_rows[:, 0], rpm_to_rad_s(prop_rows[:, 2]), model.rate_hz,
                int(t_cursor - window_us), int(t_cursor),
            )
            channels.append(np.square(trace[: model.window]))
        if len(channels) == model.n_props and all(c.size == model.window for c in channels):
            label, _scores = predict_command(model, np.stack(channels))
            rows.append((int(t_cursor), label))
        t_cursor += window_us
    if not rows:
        raise DataError("no complete windows: need speed rows for every propeller channel")
    pl.write_command_csv(args.out_csv, rows)
    cfg = _load_config(args)
    pl.write_manifest(args.out_csv + ".manifest.json", cfg.content_hash(), cfg.seed, [args.out_csv])
    print(f"inferred {len(rows)} command windows -> {args.out_csv}")
    return EXIT_OK


def _cmd_fuse(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    speeds = pl.read_speed_csv(args.speeds) if args.speeds else np.zeros((0, 4))
    commands = pl.read_command_csv(args.commands) if args.commands else []
    gps = pl.read_xyz_csv(args.gps)
    hover = np.full(4, rpm_to_rad_s(cfg.hover_rpm))
    predictor = KinematicPredictor.from_hover_calibration(hover, tilt_fraction=cfg.tilt_fraction)
    result = run_fusion(
        speeds[:, :3], commands, gps, predictor,
        gps_sigma_m=cfg.gps_sigma_m, process_noise_scale=cfg.process_noise_scale,
    )
    with open(args.out_csv, "w", newline="\n") as fh:
        fh.write("t,x,y,z,vx,vy,vz,cov_trace\n")
        for state in result.states:
            vals = ",".join(repr(float(v)) for v in state.mean)
            fh.write(f"{state.t_us},{vals},{float(np.trace(state.cov))!r}\n")
    pl.write_manifest(args.out_csv + ".manifest.json", cfg.content_hash(), cfg.seed, [args.out_csv])
    print(f"fused {len(result.states)} states ({len(result.nis)} GPS updates) -> {args.out_csv}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    entries = []
    if args.speeds and args.truth_rpm:
        speeds = pl.read_speed_csv(args.speeds)
        truth_rows, centers = pl.read_truth_rpm_csv(args.truth_rpm)
        for prop in sorted(set(int(v) for v in speeds[:, 1])) if speeds.size else []:
            rows = speeds[speeds[:, 1] == prop]
            gt = []
            for t_ref in rows[:, 0]:
                prop_truth = truth_rows[truth_rows[:, 1] == prop]
                if prop_truth.size == 0:
                    break
                k = np.argmin(np.abs(prop_truth[:, 0] - t_ref))
                gt.append(prop_truth[k, 2])
            if len(gt) == rows.shape[0] and len(gt):
                entries.append(
                    {"metric": "rmae_percent", "prop_id": prop, "value": rmae(rows[:, 2], np.array(gt)), "n_estimates": len(gt)}
                )
    if args.fused and args.truth_state:
        fused = _read_fused_csv(args.fused)
        truth = _read_state_csv(args.truth_state)
        mean_err, cdf = localization_error(fused, truth)
        entries.append({"metric": "mean_3d_error_m", "value": mean_err})
        entries.append({"metric": "error_cdf", "value": [[q, e] for q, e in cdf]})
    if not entries:
        raise ConfigError("eval needs --speeds/--truth-rpm and/or --fused/--truth-state")
    with open(args.report, "w", newline="\n") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    cfg = _load_config(args)
    pl.write_manifest(args.report + ".manifest.json", cfg.content_hash(), cfg.seed, [args.report])
    for entry in entries:
        print(json.dumps(entry, sort_keys=True))
    return EXIT_OK


def _read_fused_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.strip().split(",")])
    return np.array(rows)


def _read_state_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        fh.readline()
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            rows.append([float(v) for v in parts[:7]])
    return np.array(rows)


def _cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    result = pl.run_pipeline(cfg, args.out)
    for entry in result.metrics:
        print(json.dumps(entry, sort_keys=True))
    print(f"artifacts -> {result.out_dir}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.sample_fraction is not None:
        cfg.sample_fraction = args.sample_fraction
        cfg.validate()
    if args.input:
        events, _ = read_events(args.input, args.format)
        tracked = pl.preprocess_stream(events, cfg)
        if not tracked.warp_centers:
            raise DataError("benchmark input produced no tracks")
        track_events = tracked.track_events(0)
        center = tracked.warp_centers[0]
    else:
        from .sim import ConstantSpeed, NO_NOISE, PropellerSpec

        # hovering-drone event-rate regime: a few million events per second
        spec = PropellerSpec(
            center=(70.0, 70.0), n_blades=2, blade_length=60.0, blade_width=6.0,
            initial_phase=0.0, speed_profile=ConstantSpeed(3000.0),
        )
        track_events, _ = simulate_propellers([spec], NO_NOISE, args.duration_us, 40, seed=cfg.seed)
        center = spec.center
    report = pl.benchmark_estimate_stage(track_events, center, cfg, args.min_events_per_sec)
    os.makedirs(args.out, exist_ok=True)
    bench_path = os.path.join(args.out, "benchmark.json")
    with open(bench_path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    pl.write_manifest(os.path.join(args.out, "manifest.json"), cfg.content_hash(), cfg.seed, [bench_path])
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotorsense", description=__doc__)
    parser.add_argument("--config", help="pipeline config file (key=value lines)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", dest="global_out", default=None, help="default output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic event stream or flight")
    p.add_argument("scenario", help="scenario file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--format", default="bin", choices=("csv", "bin"))
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("preprocess", help="filter noise and segment propellers")
    p.add_argument("input")
    p.add_argument("--format", default="bin", choices=("csv", "bin"))
    p.add_argument("--out", default=None)
    p.add_argument("--window-us", type=int, dest="window_us")
    p.add_argument("--bin", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--count-ratio", type=float, dest="count_ratio")
    p.add_argument("--polarity-band", dest="polarity_band", help="lo,hi")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("estimate", help="estimate propeller speeds")
    p.add_argument("input")
    p.add_argument("--format", default="bin", choices=("csv", "bin"))
    p.add_argument("--out", default=None)
    p.add_argument("--bracket-rpm", dest="bracket_rpm", help="lo,hi")
    p.add_argument("--grid", type=int)
    p.add_argument("--tol", type=float, help="refinement tolerance, RPM")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dt-us", type=int, dest="dt_us")
    p.add_argument("--delta", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--sample-fraction", type=float, dest="sample_fraction")
    p.add_argument("--st-ratio", type=float, dest="st_ratio", help="us of time per px of space")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("train-command", help="train the flight-command classifier on synthetic traces")
    p.add_argument("--model", required=True, help="output model path")
    p.add_argument("--samples-per-class", type=int, default=200, dest="samples_per_class")
    p.add_argument("--delta-rpm", type=float, default=300.0, dest="delta_rpm")
    p.add_argument("--jitter-rpm", type=float, default=60.0, dest="jitter_rpm")
    p.set_defaults(func=_cmd_train_command)

    p = sub.add_parser("infer-command", help="classify flight commands from a speed CSV")
    p.add_argument("input", help="speed CSV from `estimate`")
    p.add_argument("--model", required=True)
    p.add_argument("--window-ms", type=float, default=100.0, dest="window_ms")
    p.add_argument("--out-csv", default="commands.csv", dest="out_csv")
    p.set_defaults(func=_cmd_infer_command)

    p = sub.add_parser("fuse", help="fuse speed priors and GPS into a state estimate")
    p.add_argument("--speeds", help="speed CSV (t_ref,prop_id,rpm,objective)")
    p.add_argument("--commands", help="command CSV (t,command)")
    p.add_argument("--gps", required=True, help="GPS CSV (t,x,y,z)")
    p.add_argument("--out-csv", default="fused.csv", dest="out_csv")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", help="compute RMAE and localization metrics")
    p.add_argument("--speeds")
    p.add_argument("--truth-rpm", dest="truth_rpm")
    p.add_argument("--fused")
    p.add_argument("--truth-state", dest="truth_state")
    p.add_argument("--report", default="metrics.jsonl")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="run simulate/ingest -> preprocess -> estimate -> metrics")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("bench", help="measure estimate-stage throughput")
    p.add_argument("--input", help="event file; defaults to a built-in simulated stream")
    p.add_argument("--format", default="bin", choices=("csv", "bin"))
    p.add_argument("--out", default=None)
    p.add_argument("--duration-us", type=int, default=400_000, dest="duration_us")
    p.add_argument("--sample-fraction", type=float, default=0.25, dest="sample_fraction")
    p.add_argument("--min-events-per-sec", type=float, default=1e6, dest="min_events_per_sec")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    if getattr(args, "out", None) is None and hasattr(args, "out"):
        args.out = args.global_out or "out"
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RotorSenseError as exc:  # pragma: no cover - catch-all for subclasses
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
