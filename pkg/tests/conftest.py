import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "agrosr", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "agrosr"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_field():
    """A 64x64 field at factor 2 that every module can chew on quickly."""
    from agrosr.synth import FieldSpec, simulate_ensemble

    spec = FieldSpec(width_px=64, height_px=64, n_strips=12, seed=7)
    ensemble, truth, regimes = simulate_ensemble(spec, 2)
    return spec, ensemble, truth, regimes


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
