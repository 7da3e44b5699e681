import numpy as np
import pytest

from tsimta import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
