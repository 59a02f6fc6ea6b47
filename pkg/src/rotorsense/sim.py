"""Synthetic event-stream generator for rotating propellers and flights.

Blades are filled rotated rectangles anchored at the rotor center. A
pixel emits a +1 event on the tick where a blade newly covers it and a
-1 event on the tick where it is uncovered, which reproduces the
bipolar leading/trailing edge structure of a real rotating propeller.
Background noise, hot pixels, and per-event positional jitter are
configurable. Every stream is deterministic for a fixed seed, and every
event carries an origin label so filters and estimators can be scored
against the truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import (
    COMMANDS,
    ROTOR_SPINS,
    calibrate_thrust_gain,
    command_acceleration,
    command_rpm_pattern,
    rpm_to_rad_s,
)
from .errors import ConfigError, NumericalError
from .events import Events, SensorGeometry

RPM_TO_RAD_US = 2.0 * math.pi / 60.0 * 1e-6

ORIGIN_BACKGROUND = -1
ORIGIN_HOT_PIXEL = -2


# --- Speed profiles ---


class ConstantSpeed:
    """Fixed rotational speed."""

    def __init__(self, rpm: float) -> None:
        if rpm < 0:
            raise ConfigError("speed must be nonnegative")
        self.rpm = float(rpm)

    def rpm_at(self, t_us: float) -> float:
        return self.rpm

    def phase_advance(self, t0_us: float, t1_us: float) -> float:
        """Unsigned blade rotation (radians) accumulated over [t0, t1]."""
        return self.rpm * RPM_TO_RAD_US * (t1_us - t0_us)

    def max_rpm(self, t0_us: float, t1_us: float) -> float:
        return self.rpm


class StepSpeed:
    """Piecewise-constant speed given as (t_us, rpm) breakpoints."""

    def __init__(self, points: Sequence[tuple[float, float]]) -> None:
        if not points:
            raise ConfigError("step profile needs at least one breakpoint")
        times = [float(t) for t, _ in points]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("step profile breakpoints must be nondecreasing in time")
        if any(rpm < 0 for _, rpm in points):
            raise ConfigError("speed must be nonnegative")
        self.points = [(float(t), float(rpm)) for t, rpm in points]

    def rpm_at(self, t_us: float) -> float:
        rpm = self.points[0][1]
        for t, value in self.points:
            if t_us >= t:
                rpm = value
            else:
                break
        return rpm

    def phase_advance(self, t0_us: float, t1_us: float) -> float:
        if t1_us < t0_us:
            raise ConfigError("phase interval is inverted")
        total = 0.0
        edges = [t for t, _ in self.points if t0_us < t < t1_us]
        cuts = [t0_us] + edges + [t1_us]
        for a, b in zip(cuts, cuts[1:]):
            total += self.rpm_at(a) * RPM_TO_RAD_US * (b - a)
        return total

    def max_rpm(self, t0_us: float, t1_us: float) -> float:
        rpms = [self.rpm_at(t0_us)]
        rpms += [rpm for t, rpm in self.points if t0_us <= t <= t1_us]
        return max(rpms)


class RampSpeed:
    """Linear speed ramp between two times, clamped outside the ramp."""

    def __init__(self, t0_us: float, rpm0: float, t1_us: float, rpm1: float) -> None:
        if t1_us <= t0_us:
            raise ConfigError("ramp must span a positive interval")
        if rpm0 < 0 or rpm1 < 0:
            raise ConfigError("speed must be nonnegative")
        self.t0, self.rpm0 = float(t0_us), float(rpm0)
        self.t1, self.rpm1 = float(t1_us), float(rpm1)

    def rpm_at(self, t_us: float) -> float:
        if t_us <= self.t0:
            return self.rpm0
        if t_us >= self.t1:
            return self.rpm1
        frac = (t_us - self.t0) / (self.t1 - self.t0)
        return self.rpm0 + frac * (self.rpm1 - self.rpm0)

    def phase_advance(self, t0_us: float, t1_us: float) -> float:
        if t1_us < t0_us:
            raise ConfigError("phase interval is inverted")
        total = 0.0
        cuts = sorted({t0_us, t1_us, min(max(self.t0, t0_us), t1_us), min(max(self.t1, t0_us), t1_us)})
        for a, b in zip(cuts, cuts[1:]):
            # rpm is linear on each cut, so the trapezoid rule is exact
            total += 0.5 * (self.rpm_at(a) + self.rpm_at(b)) * RPM_TO_RAD_US * (b - a)
        return total

    def max_rpm(self, t0_us: float, t1_us: float) -> float:
        return max(self.rpm_at(t0_us), self.rpm_at(t1_us))


SpeedProfile = ConstantSpeed | StepSpeed | RampSpeed


# --- Specs ---


@dataclass(frozen=True)
class PropellerSpec:
    """Geometry and speed profile of one simulated propeller."""

    center: tuple[float, float]
    n_blades: int
    blade_length: float  # px, hub to tip
    blade_width: float  # px
    initial_phase: float  # radians
    speed_profile: SpeedProfile
    # +1 rotates the way a positive estimator speed undoes (blade angle
    # decreases over time); -1 is the opposite visual direction
    spin: int = +1

    def __post_init__(self) -> None:
        if self.n_blades < 1:
            raise ConfigError("propeller needs at least one blade")
        if not (self.blade_length > self.blade_width > 0):
            raise ConfigError("blade_length must exceed blade_width, both positive")
        if self.spin not in (-1, +1):
            raise ConfigError("spin must be -1 or +1")


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise model: Poisson background, hot pixels, blade jitter.

    Background events are polarity-biased (event-camera leak noise fires
    predominantly ON), which is what makes per-bin polarity statistics a
    usable noise discriminator downstream.
    """

    background_rate: float = 0.0  # events per pixel per second
    hot_pixel_count: int = 0
    hot_pixel_rate: float = 0.0  # events per second, each
    vibration_jitter_px: float = 0.0  # std of positional jitter on blade events
    background_on_fraction: float = 0.95  # P(p = +1) for a background event

    def __post_init__(self) -> None:
        if min(self.background_rate, self.hot_pixel_rate, self.vibration_jitter_px) < 0:
            raise ConfigError("noise rates must be nonnegative")
        if self.hot_pixel_count < 0:
            raise ConfigError("hot pixel count must be nonnegative")
        if not 0.0 <= self.background_on_fraction <= 1.0:
            raise ConfigError("background_on_fraction must lie in [0, 1]")


NO_NOISE = NoiseSpec()


@dataclass
class GroundTruth:
    """Per-tick truth for a simulated stream.

    ``rpm[i, k]`` is propeller i's instantaneous speed at ``times_us[k]``.
    ``event_origin`` labels each emitted event with its source: the
    propeller index, ORIGIN_BACKGROUND, or ORIGIN_HOT_PIXEL. Flight runs
    additionally carry the drone state and the active command per tick.
    """

    tick_us: int
    times_us: np.ndarray
    rpm: np.ndarray
    event_origin: np.ndarray
    positions: np.ndarray | None = None
    velocities: np.ndarray | None = None
    command_ids: np.ndarray | None = None
    command_labels: tuple[str, ...] = COMMANDS

    def rpm_at(self, prop: int, t_us: float) -> float:
        k = min(int(np.searchsorted(self.times_us, t_us, side="right")) - 1, len(self.times_us) - 1)
        return float(self.rpm[prop, max(k, 0)])


# --- Blade rasterization ---


class _BladePainter:
    """Incremental coverage rasterizer for one propeller.

    Tracks a signed coverage margin per pixel (distance in pixels to the
    nearest blade boundary, positive inside) so a coverage flip between
    ticks can be timestamped at the interpolated crossing instant rather
    than the tick edge.
    """

    def __init__(self, spec: PropellerSpec, geometry: SensorGeometry) -> None:
        cx, cy = spec.center
        half = int(math.ceil(spec.blade_length)) + 2
        x_lo = max(int(math.floor(cx)) - half, 0)
        x_hi = min(int(math.floor(cx)) + half + 1, geometry.width)
        y_lo = max(int(math.floor(cy)) - half, 0)
        y_hi = min(int(math.floor(cy)) + half + 1, geometry.height)
        if x_lo >= x_hi or y_lo >= y_hi:
            raise ConfigError(f"propeller at {spec.center} lies outside the {geometry} sensor")
        xs = np.arange(x_lo, x_hi, dtype=np.int64)
        ys = np.arange(y_lo, y_hi, dtype=np.int64)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        dx = gx.ravel().astype(np.float64) - cx
        dy = gy.ravel().astype(np.float64) - cy
        keep = dx * dx + dy * dy <= (spec.blade_length + 1.0) ** 2
        self.px = gx.ravel()[keep].astype(np.uint16)
        self.py = gy.ravel()[keep].astype(np.uint16)
        self.dx = dx[keep]
        self.dy = dy[keep]
        self.spec = spec
        self.margin = np.full(self.dx.size, -np.inf)

    def coverage_margin(self, phase: float) -> np.ndarray:
        """max over blades of min(u, L-u, w/2-|v|): >= 0 iff covered."""
        spec = self.spec
        half_w = 0.5 * spec.blade_width
        margin = np.full(self.dx.size, -np.inf)
        for b in range(spec.n_blades):
            theta = phase + 2.0 * math.pi * b / spec.n_blades
            c, s = math.cos(theta), math.sin(theta)
            u = self.dx * c + self.dy * s
            v = self.dy * c - self.dx * s
            m = np.minimum(np.minimum(u, spec.blade_length - u), half_w - np.abs(v))
            np.maximum(margin, m, out=margin)
        return margin

    def coverage(self, phase: float) -> np.ndarray:
        return self.coverage_margin(phase) >= 0.0

    def reset(self, phase: float) -> None:
        self.margin = self.coverage_margin(phase)

    def step(
        self, phase: float, t_prev_us: float, t_now_us: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Advance to a new phase; return (t, x, y, p) of transition events.

        Timestamps are the linear-interpolation crossing instants of the
        coverage margin inside (t_prev, t_now]; the tick validation keeps
        per-tick motion under a pixel, where the margin is near-linear.
        """
        margin = self.coverage_margin(phase)
        prev = self.margin
        new_on = (margin >= 0.0) & (prev < 0.0)
        new_off = (margin < 0.0) & (prev >= 0.0)
        on_idx = np.flatnonzero(new_on)
        off_idx = np.flatnonzero(new_off)
        idx = np.concatenate([on_idx, off_idx])
        p = np.concatenate(
            [np.ones(on_idx.size, dtype=np.int8), -np.ones(off_idx.size, dtype=np.int8)]
        )
        denom = margin[idx] - prev[idx]
        finite_prev = np.isfinite(prev[idx])
        with np.errstate(invalid="ignore"):
            frac = np.where(
                finite_prev & (np.abs(denom) > 0), -prev[idx] / denom, 1.0
            )
        frac = np.clip(frac, 0.0, 1.0)
        t = np.rint(t_prev_us + frac * (t_now_us - t_prev_us)).astype(np.int64)
        self.margin = margin
        return t, self.px[idx], self.py[idx], p


def blade_mask(spec: PropellerSpec, phase: float, geometry: SensorGeometry) -> np.ndarray:
    """Boolean (width, height) image of pixels covered at a given phase."""
    painter = _BladePainter(spec, geometry)
    mask = np.zeros((geometry.width, geometry.height), dtype=bool)
    cov = painter.coverage(phase)
    mask[painter.px[cov].astype(np.int64), painter.py[cov].astype(np.int64)] = True
    return mask


def _validate_tick(spec: PropellerSpec, duration_us: int, tick_us: int) -> None:
    peak_rpm = spec.speed_profile.max_rpm(0, duration_us)
    tip_speed = rpm_to_rad_s(peak_rpm) * spec.blade_length  # px/s
    if tip_speed * tick_us * 1e-6 > 1.0:
        required = int(1e6 / tip_speed) if tip_speed > 0 else tick_us
        raise ConfigError(
            f"tick {tick_us} us too coarse: blade tip moves "
            f"{tip_speed * tick_us * 1e-6:.2f} px per tick at {peak_rpm:.0f} RPM; "
            f"use tick <= {required} us"
        )


def default_geometry(specs: Sequence[PropellerSpec]) -> SensorGeometry:
    width = max(int(math.ceil(s.center[0] + s.blade_length)) + 4 for s in specs)
    height = max(int(math.ceil(s.center[1] + s.blade_length)) + 4 for s in specs)
    return SensorGeometry(width, height)


def _background_events(
    noise: NoiseSpec, geometry: SensorGeometry, duration_us: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    parts_t, parts_x, parts_y, parts_p, parts_o = [], [], [], [], []
    duration_s = duration_us * 1e-6
    if noise.background_rate > 0:
        n = rng.poisson(noise.background_rate * geometry.width * geometry.height * duration_s)
        if n:
            parts_t.append(rng.integers(0, duration_us + 1, size=n, dtype=np.int64))
            parts_x.append(rng.integers(0, geometry.width, size=n, dtype=np.int64))
            parts_y.append(rng.integers(0, geometry.height, size=n, dtype=np.int64))
            pol = np.where(rng.random(n) < noise.background_on_fraction, 1, -1).astype(np.int8)
            parts_p.append(pol)
            parts_o.append(np.full(n, ORIGIN_BACKGROUND, dtype=np.int16))
    if noise.hot_pixel_count > 0 and noise.hot_pixel_rate > 0:
        n_px = min(noise.hot_pixel_count, geometry.width * geometry.height)
        flat = rng.choice(geometry.width * geometry.height, size=n_px, replace=False)
        hx, hy = flat // geometry.height, flat % geometry.height
        sign = np.where(rng.random(n_px) < 0.5, 1, -1).astype(np.int8)
        counts = rng.poisson(noise.hot_pixel_rate * duration_s, size=n_px)
        for i in range(n_px):
            if counts[i] == 0:
                continue
            parts_t.append(rng.integers(0, duration_us + 1, size=counts[i], dtype=np.int64))
            parts_x.append(np.full(counts[i], hx[i], dtype=np.int64))
            parts_y.append(np.full(counts[i], hy[i], dtype=np.int64))
            parts_p.append(np.full(counts[i], sign[i], dtype=np.int8))
            parts_o.append(np.full(counts[i], ORIGIN_HOT_PIXEL, dtype=np.int16))
    if not parts_t:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty, np.empty(0, np.int8), np.empty(0, np.int16)
    return (
        np.concatenate(parts_t),
        np.concatenate(parts_x),
        np.concatenate(parts_y),
        np.concatenate(parts_p),
        np.concatenate(parts_o),
    )


def _paint_propellers(
    specs: Sequence[PropellerSpec],
    phases: list[np.ndarray],
    tick_times: np.ndarray,
    geometry: SensorGeometry,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize coverage transitions for all propellers over shared ticks."""
    painters = [_BladePainter(spec, geometry) for spec in specs]
    for painter, phase in zip(painters, phases):
        painter.reset(float(phase[0]))
    parts_t, parts_x, parts_y, parts_p, parts_o = [], [], [], [], []
    for k in range(1, tick_times.size):
        t_prev, t_now = float(tick_times[k - 1]), float(tick_times[k])
        for i, painter in enumerate(painters):
            t, x, y, p = painter.step(float(phases[i][k]), t_prev, t_now)
            if x.size:
                parts_t.append(t)
                parts_x.append(x.astype(np.int64))
                parts_y.append(y.astype(np.int64))
                parts_p.append(p)
                parts_o.append(np.full(x.size, i, dtype=np.int16))
    if not parts_t:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty, np.empty(0, np.int8), np.empty(0, np.int16)
    return (
        np.concatenate(parts_t),
        np.concatenate(parts_x),
        np.concatenate(parts_y),
        np.concatenate(parts_p),
        np.concatenate(parts_o),
    )


def _assemble_stream(
    blade: tuple[np.ndarray, ...],
    noise_parts: tuple[np.ndarray, ...],
    noise: NoiseSpec,
    geometry: SensorGeometry,
    rng: np.random.Generator,
) -> tuple[Events, np.ndarray]:
    bt, bx, by, bp, bo = blade
    if noise.vibration_jitter_px > 0 and bt.size:
        bx = np.clip(np.rint(bx + rng.normal(0, noise.vibration_jitter_px, bt.size)), 0, geometry.width - 1).astype(np.int64)
        by = np.clip(np.rint(by + rng.normal(0, noise.vibration_jitter_px, bt.size)), 0, geometry.height - 1).astype(np.int64)
    nt, nx, ny, np_, no = noise_parts
    t = np.concatenate([bt, nt])
    x = np.concatenate([bx, nx])
    y = np.concatenate([by, ny])
    p = np.concatenate([bp, np_])
    origin = np.concatenate([bo, no])
    order = np.argsort(t, kind="stable")
    events = Events(t[order].astype(np.uint64), x[order], y[order], p[order], validate=False)
    return events, origin[order]


def simulate_propellers(
    specs: Sequence[PropellerSpec],
    noise: NoiseSpec,
    duration_us: int,
    tick_us: int,
    seed: int,
    geometry: SensorGeometry | None = None,
) -> tuple[Events, GroundTruth]:
    """Simulate rotating propellers on a static sensor.

    Deterministic for fixed inputs and seed. Raises ConfigError when the
    tick is too coarse for the requested peak speed (a blade tip must not
    move more than one pixel per tick).
    """
    if not specs:
        raise ConfigError("need at least one propeller spec")
    if tick_us <= 0 or duration_us < 0:
        raise ConfigError("tick and duration must be positive")
    for spec in specs:
        _validate_tick(spec, duration_us, tick_us)
    if geometry is None:
        geometry = default_geometry(specs)

    n_ticks = duration_us // tick_us
    tick_times = np.arange(n_ticks + 1, dtype=np.int64) * tick_us
    phases = []
    rpm = np.zeros((len(specs), tick_times.size))
    for i, spec in enumerate(specs):
        profile = spec.speed_profile
        phase = np.empty(tick_times.size)
        acc = spec.initial_phase
        phase[0] = acc
        for k in range(1, tick_times.size):
            step = profile.phase_advance(float(tick_times[k - 1]), float(tick_times[k]))
            acc -= spec.spin * step
            # accumulated phase must equal the closed-form advance from t=0
            direct = spec.initial_phase - spec.spin * profile.phase_advance(0.0, float(tick_times[k]))
            if abs(acc - direct) > 1e-6 * max(1.0, abs(direct)):
                raise NumericalError(
                    f"speed profile phase drift at t={int(tick_times[k])} us: {acc} vs {direct}"
                )
            phase[k] = acc
        phases.append(phase)
        rpm[i] = [profile.rpm_at(float(t)) for t in tick_times]

    rng = np.random.default_rng(seed)
    blade = _paint_propellers(specs, phases, tick_times, geometry)
    noise_parts = _background_events(noise, geometry, duration_us, rng)
    events, origin = _assemble_stream(blade, noise_parts, noise, geometry, rng)
    truth = GroundTruth(tick_us=tick_us, times_us=tick_times, rpm=rpm, event_origin=origin)
    return events, truth


# --- Flight simulation ---


@dataclass(frozen=True)
class DroneSpec:
    """Quadrotor scenario parameters for flight simulation."""

    hover_rpm: float = 3000.0
    delta_rpm: float = 300.0
    rpm_jitter: float = 0.0  # std of per-tick speed jitter, RPM
    tilt_fraction: float = 0.2
    gps_rate_hz: float = 5.0
    gps_sigma_m: float = 2.0
    rotor_centers: tuple[tuple[float, float], ...] = (
        (120.0, 120.0),
        (360.0, 120.0),
        (360.0, 360.0),
        (120.0, 360.0),
    )
    blade_length: float = 30.0
    blade_width: float = 5.0
    n_blades: int = 2

    @property
    def n_rotors(self) -> int:
        return len(self.rotor_centers)


@dataclass
class FlightResult:
    """Everything simulate_flight produces, on one shared clock."""

    events: Events
    truth: GroundTruth
    rpm_traces: np.ndarray  # (n_rotors, T) jittered, tachometer-like
    gps: np.ndarray  # (M, 4): t_us, x, y, z


def _script_commands(script: Sequence[tuple[int, str]], tick_times: np.ndarray) -> np.ndarray:
    if any(b[0] < a[0] for a, b in zip(script, script[1:])):
        raise ConfigError("command script times must be nondecreasing")
    ids = np.zeros(tick_times.size, dtype=np.int16)  # hover before first entry
    for t_cmd, name in script:
        if name not in COMMANDS:
            raise ConfigError(f"unknown command {name!r}, expected one of {COMMANDS}")
        ids[tick_times >= t_cmd] = COMMANDS.index(name)
    return ids


def simulate_flight(
    command_script: Sequence[tuple[int, str]],
    drone_spec: DroneSpec,
    noise: NoiseSpec,
    duration_us: int,
    seed: int,
    *,
    tick_us: int = 1000,
    render_events: bool = False,
    render_tick_us: int = 40,
    geometry: SensorGeometry | None = None,
) -> FlightResult:
    """Simulate a scripted quadrotor flight.

    Rotor speeds follow the command mixer plus Gaussian jitter; the true
    trajectory integrates the command-conditioned acceleration model on
    the clean speeds; GPS samples are truth plus zero-mean Gaussian
    noise. Event rendering is optional because command/fusion studies
    only need the traces; when enabled, blade phases integrate the
    jittered traces so painted events match the reported speeds.
    """
    if tick_us <= 0 or duration_us <= 0:
        raise ConfigError("tick and duration must be positive")
    rng = np.random.default_rng(seed)
    n_ticks = duration_us // tick_us
    tick_times = np.arange(n_ticks + 1, dtype=np.int64) * tick_us
    command_ids = _script_commands(list(command_script), tick_times)

    n_rotors = drone_spec.n_rotors
    clean_rpm = np.zeros((n_rotors, tick_times.size))
    for k in range(tick_times.size):
        clean_rpm[:, k] = command_rpm_pattern(
            COMMANDS[command_ids[k]], drone_spec.hover_rpm, drone_spec.delta_rpm, n_rotors
        )
    jitter = rng.normal(0.0, drone_spec.rpm_jitter, size=clean_rpm.shape) if drone_spec.rpm_jitter > 0 else 0.0
    traces = np.maximum(clean_rpm + jitter, 0.0)

    hover_speeds = rpm_to_rad_s(
        command_rpm_pattern("hover", drone_spec.hover_rpm, drone_spec.delta_rpm, n_rotors)
    )
    k_f = calibrate_thrust_gain(hover_speeds)
    hover_sq = float(np.sum(np.square(hover_speeds)))

    dt_s = tick_us * 1e-6
    positions = np.zeros((tick_times.size, 3))
    velocities = np.zeros((tick_times.size, 3))
    for k in range(1, tick_times.size):
        cmd = COMMANDS[command_ids[k - 1]]
        accel = command_acceleration(
            cmd, rpm_to_rad_s(clean_rpm[:, k - 1]), k_f, hover_sq, drone_spec.tilt_fraction
        )
        positions[k] = positions[k - 1] + velocities[k - 1] * dt_s + 0.5 * accel * dt_s**2
        velocities[k] = velocities[k - 1] + accel * dt_s

    gps_period_us = max(int(round(1e6 / drone_spec.gps_rate_hz)), tick_us)
    gps_period_us -= gps_period_us % tick_us  # align fixes to truth ticks
    gps_times = np.arange(0, duration_us + 1, gps_period_us, dtype=np.int64)
    gps_idx = gps_times // tick_us
    gps_pos = positions[gps_idx] + rng.normal(0.0, drone_spec.gps_sigma_m, size=(gps_times.size, 3))
    gps = np.column_stack([gps_times.astype(np.float64), gps_pos])

    if render_events:
        events, origin = _render_flight_events(
            drone_spec, noise, traces, tick_times, render_tick_us, geometry, rng
        )
    else:
        events = Events.empty()
        origin = np.empty(0, dtype=np.int16)

    truth = GroundTruth(
        tick_us=tick_us,
        times_us=tick_times,
        rpm=traces,
        event_origin=origin,
        positions=positions,
        velocities=velocities,
        command_ids=command_ids,
    )
    return FlightResult(events=events, truth=truth, rpm_traces=traces, gps=gps)


def _render_flight_events(
    drone: DroneSpec,
    noise: NoiseSpec,
    traces: np.ndarray,
    tick_times: np.ndarray,
    render_tick_us: int,
    geometry: SensorGeometry | None,
    rng: np.random.Generator,
) -> tuple[Events, np.ndarray]:
    specs = [
        PropellerSpec(
            center=c,
            n_blades=drone.n_blades,
            blade_length=drone.blade_length,
            blade_width=drone.blade_width,
            initial_phase=0.0,
            speed_profile=ConstantSpeed(float(np.max(traces))),
            spin=int(ROTOR_SPINS[i % 4]),
        )
        for i, c in enumerate(drone.rotor_centers)
    ]
    for spec in specs:
        _validate_tick(spec, int(tick_times[-1]), render_tick_us)
    if geometry is None:
        geometry = default_geometry(specs)
    duration_us = int(tick_times[-1])
    render_times = np.arange(0, duration_us + 1, render_tick_us, dtype=np.int64)
    # zero-order-hold phase integral of the per-tick traces
    phases = []
    for i, spec in enumerate(specs):
        omega_rad_us = traces[i] * RPM_TO_RAD_US
        coarse = np.concatenate([[0.0], np.cumsum(omega_rad_us[:-1] * np.diff(tick_times))])
        idx = np.minimum(render_times // (tick_times[1] - tick_times[0]), len(coarse) - 1)
        base = coarse[idx]
        frac = (render_times - tick_times[idx]).astype(np.float64)
        phase = base + omega_rad_us[np.minimum(idx, traces.shape[1] - 1)] * frac
        phases.append(spec.initial_phase - spec.spin * phase)
    blade = _paint_propellers(specs, phases, render_times, geometry)
    noise_parts = _background_events(noise, geometry, duration_us, rng)
    return _assemble_stream(blade, noise_parts, noise, geometry, rng)


# --- Classifier dataset synthesis ---


def generate_command_dataset(
    n_per_class: int,
    drone_spec: DroneSpec,
    window_samples: int,
    rate_hz: float,
    seed: int,
) -> list[tuple[np.ndarray, str]]:
    """Labelled squared-speed windows for classifier training.

    Each sample is an (n_rotors, window) array of squared angular speeds
    (rad/s)^2 following the command mixer plus per-step Gaussian jitter.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for command in COMMANDS:
        pattern = command_rpm_pattern(command, drone_spec.hover_rpm, drone_spec.delta_rpm, drone_spec.n_rotors)
        for _ in range(n_per_class):
            rpm = pattern[:, None] + rng.normal(0.0, drone_spec.rpm_jitter, size=(drone_spec.n_rotors, window_samples))
            omega = rpm_to_rad_s(np.maximum(rpm, 0.0))
            samples.append((np.square(omega), command))
    return samples
