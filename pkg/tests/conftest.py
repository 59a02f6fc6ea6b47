import numpy as np
import pytest

from rotorsense.events import SensorGeometry
from rotorsense.sim import (
    ConstantSpeed,
    NO_NOISE,
    NoiseSpec,
    PropellerSpec,
    simulate_propellers,
)

CENTER = (60.0, 60.0)


def make_spec(rpm=3000.0, center=CENTER, blade_length=30.0, blade_width=5.0, phase=0.3, spin=1):
    return PropellerSpec(
        center=center,
        n_blades=2,
        blade_length=blade_length,
        blade_width=blade_width,
        initial_phase=phase,
        speed_profile=ConstantSpeed(rpm),
        spin=spin,
    )


@pytest.fixture(scope="session")
def clean_3000():
    """Noise-free 3000 RPM stream, 50 ms: the workhorse fixture."""
    events, truth = simulate_propellers([make_spec()], NO_NOISE, duration_us=50_000, tick_us=50, seed=1)
    return events, truth


@pytest.fixture(scope="session")
def noisy_3000():
    """3000 RPM with background noise, hot pixels, and jitter on a 320x240 sensor."""
    noise = NoiseSpec(
        background_rate=10.0, hot_pixel_count=20, hot_pixel_rate=2000.0, vibration_jitter_px=0.5
    )
    spec = make_spec(center=(80.0, 80.0), blade_length=40.0)
    events, truth = simulate_propellers(
        [spec], noise, duration_us=100_000, tick_us=40, seed=3, geometry=SensorGeometry(320, 240)
    )
    return events, truth, spec


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
