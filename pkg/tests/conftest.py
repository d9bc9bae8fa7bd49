import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cycle3d.codec import LatentCodec
from cycle3d.net.unet import UNetConfig, init_params
from cycle3d.schedule import TOY_BETA_END, TOY_BETA_START, build_linear_schedule

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class UntrainedModel:
    """Freshly initialised network with the sampling interface."""

    def __init__(self, T=8, channels=(8, 16), seed=0):
        self.net_config = UNetConfig(channels=channels, head_steps=T)
        self.params = init_params(self.net_config, seed, np.float32)
        self.schedule = build_linear_schedule(T, TOY_BETA_START, TOY_BETA_END)
        self.codec = LatentCodec("identity")


@pytest.fixture
def untrained_model():
    return UntrainedModel()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
