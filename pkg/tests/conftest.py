import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sahmr.synth import default_body, gen_frame

settings.register_profile("sahmr", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sahmr")


@pytest.fixture(scope="session")
def body():
    return default_body()


@pytest.fixture(scope="session")
def frames(body):
    """One frame per scenario, shared across modules."""
    return {s: gen_frame(7, s, body) for s in ("sit_box", "lie_plane", "stand_floor", "lean_wall")}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
