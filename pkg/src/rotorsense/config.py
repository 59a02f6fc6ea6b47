"""Pipeline and scenario configuration: flat key=value text files.

Two file kinds share the same syntax (one ``key=value`` per line, ``#``
comments): scenario files describing what to simulate, and pipeline
configs holding every stage's knobs. Unknown keys are rejected and the
whole config is validated before any stage runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .batching import BatchPolicy
from .dynamics import COMMANDS
from .errors import ConfigError
from .events import SensorGeometry
from .sim import ConstantSpeed, DroneSpec, NoiseSpec, PropellerSpec, RampSpeed, StepSpeed


def parse_kv_file(path: str) -> dict[str, str]:
    """Parse a flat key=value file; later keys override earlier ones."""
    out: dict[str, str] = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_bool(value: str, key: str) -> bool:
    if value in ("1", "true", "yes"):
        return True
    if value in ("0", "false", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean (0/1), got {value!r}")


def _parse_pair(value: str, key: str) -> tuple[float, float]:
    parts = value.split(",")
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'a,b', got {value!r}")
    return float(parts[0]), float(parts[1])


@dataclass
class PipelineConfig:
    """Every stage's parameters plus seed and I/O paths."""

    seed: int = 0
    scenario: str = ""  # scenario file to simulate; empty means read `input`
    input: str = ""
    input_format: str = "bin"
    output_format: str = "bin"
    # preprocess
    filter_enabled: bool = True
    window_us: int = 5000
    bin_size: int = 5
    k_props: int = 1
    count_ratio: float = 1.0 / 3.0
    polarity_lo: float = 0.3
    polarity_hi: float = 0.7
    # adaptive batching
    dt_us: int = 1000
    delta: float = 0.3
    beta: int = 8
    sample_fraction: float = 1.0
    space_radius_px: float = 2.0
    time_radius_us: float = 200.0
    # batches truncated below this many bundles are grown/consumed but not
    # reported: a lone bundle's objective basin is too wide to trust
    min_emit_bundles: int = 2
    # speed estimation
    bracket_rpm_lo: float = 500.0
    bracket_rpm_hi: float = 12000.0
    n_grid: int = 64
    tol_rpm: float = 0.5
    epsilon: float = 1.0
    # command inference
    svm_lambda: float = 1e-3
    svm_epochs: int = 20
    svm_folds: int = 5
    window_ms: float = 100.0
    resample_hz: float = 1000.0
    cutoff_hz: float = 50.0
    # fusion
    hover_rpm: float = 3000.0
    gps_sigma_m: float = 2.0
    process_noise_scale: float = 0.05
    tilt_fraction: float = 0.2
    # plots are best-effort artifacts; CSV series are always written
    plots: bool = False

    @classmethod
    def from_dict(cls, raw: dict[str, str], source: str = "<config>") -> "PipelineConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        unknown = [k for k in raw if k not in known]
        if unknown:
            raise ConfigError(f"{source}: unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in raw.items():
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    parsed = _parse_bool(value, key)
                elif isinstance(current, int):
                    parsed = int(value)
                elif isinstance(current, float):
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key}: {value!r}") from exc
            setattr(cfg, key, parsed)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        return cls.from_dict(parse_kv_file(path), source=path)

    def validate(self) -> None:
        if self.window_us <= 0:
            raise ConfigError("window_us must be positive")
        if self.bin_size < 1:
            raise ConfigError("bin_size must be >= 1")
        if self.k_props < 1:
            raise ConfigError("k_props must be >= 1")
        if self.count_ratio < 0:
            raise ConfigError("count_ratio must be nonnegative")
        if not 0.0 <= self.polarity_lo <= self.polarity_hi <= 1.0:
            raise ConfigError("polarity band must satisfy 0 <= lo <= hi <= 1")
        # BatchPolicy re-validates its own invariants (delta > 0, beta >= 1, ...)
        self.batch_policy()
        if not 0 <= self.bracket_rpm_lo < self.bracket_rpm_hi:
            raise ConfigError("speed bracket must satisfy 0 <= lo < hi")
        if self.n_grid < 3:
            raise ConfigError("n_grid must be at least 3")
        if self.tol_rpm <= 0:
            raise ConfigError("tol_rpm must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.input_format not in ("csv", "bin") or self.output_format not in ("csv", "bin"):
            raise ConfigError("event file formats must be 'csv' or 'bin'")
        if self.svm_folds < 2:
            raise ConfigError("svm_folds must be at least 2")
        if self.min_emit_bundles < 1:
            raise ConfigError("min_emit_bundles must be at least 1")
        if self.gps_sigma_m <= 0:
            raise ConfigError("gps_sigma_m must be positive")

    def batch_policy(self) -> BatchPolicy:
        return BatchPolicy(
            dt_us=self.dt_us,
            delta=self.delta,
            max_bundles=self.beta,
            sample_fraction=self.sample_fraction,
            space_radius_px=self.space_radius_px,
            time_radius_us=self.time_radius_us,
        )

    def canonical(self) -> str:
        lines = []
        for f in sorted(f.name for f in fields(self)):
            value = getattr(self, f)
            if isinstance(value, bool):
                value = int(value)
            lines.append(f"{f}={value!r}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass
class Scenario:
    """Parsed simulation scenario: either rotating propellers on a static
    sensor or a scripted quadrotor flight."""

    mode: str = "propellers"
    geometry: SensorGeometry | None = None
    duration_us: int = 100_000
    tick_us: int = 50
    seed: int = 0
    specs: list[PropellerSpec] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    drone: DroneSpec = field(default_factory=DroneSpec)
    script: list[tuple[int, str]] = field(default_factory=list)
    render_events: bool = False


_SCENARIO_KEYS = {
    "mode", "width", "height", "duration_us", "tick_us", "seed", "render_events", "script",
}
_PROP_KEYS = {"center", "blades", "blade_length", "blade_width", "phase", "spin", "rpm", "rpm_step", "rpm_ramp"}
_NOISE_KEYS = {"background_rate", "hot_pixels", "hot_pixel_rate", "jitter_px", "on_fraction"}
_DRONE_KEYS = {
    "hover_rpm", "delta_rpm", "rpm_jitter", "tilt_fraction", "gps_rate_hz", "gps_sigma_m",
    "blade_length", "blade_width", "n_blades",
}


def _build_profile(entry: dict[str, str], name: str):
    given = [k for k in ("rpm", "rpm_step", "rpm_ramp") if k in entry]
    if len(given) != 1:
        raise ConfigError(f"{name}: exactly one of rpm, rpm_step, rpm_ramp is required")
    key = given[0]
    if key == "rpm":
        return ConstantSpeed(float(entry["rpm"]))
    points = []
    for part in entry[key].split(","):
        t_str, rpm_str = part.split(":")
        points.append((float(t_str), float(rpm_str)))
    if key == "rpm_step":
        return StepSpeed(points)
    if len(points) != 2:
        raise ConfigError(f"{name}: rpm_ramp needs exactly two t:rpm points")
    (t0, r0), (t1, r1) = points
    return RampSpeed(t0, r0, t1, r1)


def parse_scenario(path: str) -> Scenario:
    raw = parse_kv_file(path)
    scenario = Scenario()
    props: dict[int, dict[str, str]] = {}
    noise_kv: dict[str, str] = {}
    drone_kv: dict[str, str] = {}
    for key, value in raw.items():
        if key.startswith("prop"):
            head, _, sub = key.partition(".")
            try:
                idx = int(head[4:])
            except ValueError:
                raise ConfigError(f"{path}: bad propeller key {key!r}") from None
            if sub not in _PROP_KEYS:
                raise ConfigError(f"{path}: unknown propeller key {key!r}")
            props.setdefault(idx, {})[sub] = value
        elif key.startswith("noise."):
            sub = key[6:]
            if sub not in _NOISE_KEYS:
                raise ConfigError(f"{path}: unknown noise key {key!r}")
            noise_kv[sub] = value
        elif key.startswith("drone."):
            sub = key[6:]
            if sub not in _DRONE_KEYS:
                raise ConfigError(f"{path}: unknown drone key {key!r}")
            drone_kv[sub] = value
        elif key not in _SCENARIO_KEYS:
            raise ConfigError(f"{path}: unknown scenario key {key!r}")

    scenario.mode = raw.get("mode", "propellers")
    if scenario.mode not in ("propellers", "flight"):
        raise ConfigError(f"{path}: mode must be 'propellers' or 'flight'")
    if "width" in raw or "height" in raw:
        if not ("width" in raw and "height" in raw):
            raise ConfigError(f"{path}: width and height must be given together")
        scenario.geometry = SensorGeometry(int(raw["width"]), int(raw["height"]))
    scenario.duration_us = int(raw.get("duration_us", scenario.duration_us))
    scenario.tick_us = int(raw.get("tick_us", scenario.tick_us))
    scenario.seed = int(raw.get("seed", scenario.seed))
    scenario.render_events = _parse_bool(raw.get("render_events", "0"), "render_events")

    for idx in sorted(props):
        entry = props[idx]
        center = _parse_pair(entry.get("center", ""), f"prop{idx}.center")
        scenario.specs.append(
            PropellerSpec(
                center=center,
                n_blades=int(entry.get("blades", 2)),
                blade_length=float(entry.get("blade_length", 30.0)),
                blade_width=float(entry.get("blade_width", 5.0)),
                initial_phase=float(entry.get("phase", 0.0)),
                speed_profile=_build_profile(entry, f"prop{idx}"),
                spin=int(entry.get("spin", 1)),
            )
        )
    scenario.noise = NoiseSpec(
        background_rate=float(noise_kv.get("background_rate", 0.0)),
        hot_pixel_count=int(noise_kv.get("hot_pixels", 0)),
        hot_pixel_rate=float(noise_kv.get("hot_pixel_rate", 0.0)),
        vibration_jitter_px=float(noise_kv.get("jitter_px", 0.0)),
        background_on_fraction=float(noise_kv.get("on_fraction", 0.95)),
    )
    if drone_kv:
        scenario.drone = DroneSpec(
            hover_rpm=float(drone_kv.get("hover_rpm", 3000.0)),
            delta_rpm=float(drone_kv.get("delta_rpm", 300.0)),
            rpm_jitter=float(drone_kv.get("rpm_jitter", 0.0)),
            tilt_fraction=float(drone_kv.get("tilt_fraction", 0.2)),
            gps_rate_hz=float(drone_kv.get("gps_rate_hz", 5.0)),
            gps_sigma_m=float(drone_kv.get("gps_sigma_m", 2.0)),
            blade_length=float(drone_kv.get("blade_length", 30.0)),
            blade_width=float(drone_kv.get("blade_width", 5.0)),
            n_blades=int(drone_kv.get("n_blades", 2)),
        )
    if "script" in raw:
        for part in raw["script"].split(","):
            t_str, _, name = part.partition(":")
            if name not in COMMANDS:
                raise ConfigError(f"{path}: unknown command {name!r} in script")
            scenario.script.append((int(t_str), name))
    if scenario.mode == "propellers" and not scenario.specs:
        raise ConfigError(f"{path}: propeller mode needs at least one propN.* block")
    if scenario.mode == "flight" and not scenario.script:
        raise ConfigError(f"{path}: flight mode needs a script")
    return scenario
