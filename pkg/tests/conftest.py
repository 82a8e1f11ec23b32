import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metatune.synthbench import SceneSpec, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench():
    """The default 2000-image benchmark with its ROI cache built."""
    b = generate(SceneSpec(), seed=0)
    b.rois(0)
    return b


@pytest.fixture(scope="session")
def small_bench():
    b = generate(SceneSpec(n_images=240), seed=3)
    b.rois(0)
    return b


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def base_model(bench):
    """Head pretrained on the base-only pool with the default run settings."""
    from metatune.config import RunConfig
    from metatune.pipeline import pretrain_base
    return pretrain_base(bench, RunConfig())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
