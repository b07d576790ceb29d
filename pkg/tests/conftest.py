import pytest

from flexsim import _jit

ACCEPTANCE_LINES = []


@pytest.fixture(params=["numba", "numpy"])
def loop_path(request):
    """Run the test once on the jitted loops and once on the numpy fallback."""
    if request.param == "numba" and not _jit.JIT_AVAILABLE:
        pytest.skip("numba not installed")
    prev = _jit.set_jit(request.param == "numba")
    yield request.param
    _jit.set_jit(prev)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
