import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dynscene.fixtures import plane_wave, two_layer, waterfall
from dynscene.geometry import CameraIntrinsics, CameraModel, CameraPose

settings.register_profile("dynscene", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dynscene")


@pytest.fixture(scope="session")
def plane_wave_scene():
    return plane_wave()


@pytest.fixture(scope="session")
def two_layer_scene():
    return two_layer()


@pytest.fixture(scope="session")
def waterfall_scene():
    return waterfall()


@pytest.fixture
def cam100():
    """Identity camera with fx = fy = 100 and principal point (50, 50)."""
    return CameraModel(CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100), CameraPose.identity())



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
