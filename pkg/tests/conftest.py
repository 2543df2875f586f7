import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL = {"space": {"extent": [4000.0, 4000.0, 2000.0], "resolution": [40, 40, 20]},
         "scene": {"min_persons": 1, "max_persons": 2, "camera_count": 3, "ring_radius": 4500.0},
         "nets": {"hdn_width": 4, "hdn1d_width": 4, "pose_width": 4, "conf_width": 4},
         "train": {"epochs": 1, "batch_size": 2},
         "jln": {"fine_res": 16}}


@pytest.fixture
def small_cfg():
    """A reduced space and narrow nets so training paths run in seconds."""
    from orthovox.config import RunConfig
    return RunConfig.from_dict(SMALL)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
