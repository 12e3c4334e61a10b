import numpy as np
import pytest

from icl_lista.instances import InstanceConfig, sample_instance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_instance():
    return sample_instance(InstanceConfig(), seed=7)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda text: int(text.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)
