import numpy as np
import pytest

from retseg import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available())
def backend(request):
    """Run a test once per available kernel backend."""
    prev = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(prev)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
